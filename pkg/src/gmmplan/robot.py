"""Synthetic tendon-driven continuum robot used as the ground-truth source.

The backbone is a constant-curvature arc driven by three parallel tendons
at 0/120/240 degrees, with a fourth helical tendon that twists the bending
plane along arclength. Point clouds are drawn from the tube surface around
the backbone, with an approach-history-dependent hysteresis offset on the
realized configuration and isotropic sensor noise on every point — the two
effects that give repeated visits to the same commanded configuration a
visible spread.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ParseError
from .mdn import Dataset

PARALLEL_ANGLES = 2.0 * np.pi * np.arange(3) / 3.0


@dataclass(frozen=True)
class RobotSpec:
    length: float = 0.2            # m
    tendon_count: int = 4          # three parallel + one helical
    offset_radius: float = 0.01    # tendon routing radius, m
    body_radius: float = 0.005     # tube radius, m
    d_min: float = 0.0
    d_max: float = 0.03
    hysteresis_scale: float = 0.0015   # m
    noise_scale: float = 0.001         # m
    helical_coupling: float = 0.5

    def __post_init__(self):
        if self.length <= 0 or self.offset_radius <= 0 or self.body_radius <= 0:
            raise InvalidInputError("robot dimensions must be positive")
        if not self.d_min < self.d_max:
            raise InvalidInputError("displacement limits must be ordered")

    @property
    def d_range(self) -> float:
        return self.d_max - self.d_min

    def clamp(self, d: np.ndarray) -> np.ndarray:
        return np.clip(d, self.d_min, self.d_max)

    def contains(self, d: np.ndarray) -> bool:
        d = np.asarray(d)
        return bool(np.all(d >= self.d_min) and np.all(d <= self.d_max))


@dataclass(frozen=True)
class ApproachContext:
    start: np.ndarray
    target: np.ndarray
    seed: int


def backbone_points(spec: RobotSpec, d: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Backbone positions at normalized arclengths ``s`` in [0, 1].

    Vectorized over ``s``; returns (len(s), 3).
    """
    d = np.asarray(d, dtype=float).reshape(-1)
    s = np.atleast_1d(np.asarray(s, dtype=float))
    ux = float(np.sum(d[:3] * np.cos(PARALLEL_ANGLES)))
    uy = float(np.sum(d[:3] * np.sin(PARALLEL_ANGLES)))
    phi0 = np.arctan2(uy, ux)
    kappa = np.hypot(ux, uy) / (spec.offset_radius * spec.length)
    d4 = d[3] if d.shape[0] > 3 else 0.0
    phi = phi0 + spec.helical_coupling * d4 * s / spec.offset_radius

    arc = s * spec.length
    theta = kappa * arc
    if kappa > 1e-9:
        radial = (1.0 - np.cos(theta)) / kappa
        height = np.sin(theta) / kappa
    else:
        # series limits of (1-cos)/kappa and sin/kappa as kappa -> 0
        radial = kappa * arc ** 2 / 2.0 - kappa ** 3 * arc ** 4 / 24.0
        height = arc - kappa ** 2 * arc ** 3 / 6.0
    return np.stack([radial * np.cos(phi), radial * np.sin(phi), height], axis=1)


def backbone(spec: RobotSpec, d: np.ndarray, s: float) -> np.ndarray:
    """Single backbone point at normalized arclength ``s``."""
    if not 0.0 <= s <= 1.0:
        raise InvalidInputError(f"s must lie in [0, 1], got {s}")
    return backbone_points(spec, d, np.array([s]))[0]


def _tube_frames(spec: RobotSpec, d: np.ndarray, s: np.ndarray):
    """Unit tangents plus an orthonormal pair spanning each normal plane."""
    h = 1e-4
    lo = np.clip(s - h, 0.0, 1.0)
    hi = np.clip(s + h, 0.0, 1.0)
    tangents = backbone_points(spec, d, hi) - backbone_points(spec, d, lo)
    tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
    ref = np.where(np.abs(tangents[:, [0]]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    n1 = np.cross(tangents, ref)
    n1 /= np.linalg.norm(n1, axis=1, keepdims=True)
    n2 = np.cross(tangents, n1)
    return n1, n2


def effective_config(spec: RobotSpec, ctx: ApproachContext,
                     rng: np.random.Generator) -> np.ndarray:
    """Commanded target plus the approach-dependent hysteresis offset."""
    start = np.asarray(ctx.start, dtype=float)
    target = np.asarray(ctx.target, dtype=float)
    if not (spec.contains(start) and spec.contains(target)):
        raise InvalidInputError("approach configurations must respect displacement limits")
    g = rng.standard_normal(target.shape[0])
    offset = spec.hysteresis_scale * np.tanh((target - start) / spec.d_range) * np.abs(g)
    return spec.clamp(target + offset)


def simulate_cloud(spec: RobotSpec, ctx: ApproachContext, points: int) -> np.ndarray:
    """One captured point cloud for an approach; deterministic given ctx.seed."""
    if points < 1:
        raise InvalidInputError(f"points must be >= 1, got {points}")
    rng = np.random.default_rng(ctx.seed)
    d_eff = effective_config(spec, ctx, rng)
    s = rng.random(points)
    psi = rng.random(points) * 2.0 * np.pi
    noise = rng.standard_normal((points, 3)) * spec.noise_scale
    centers = backbone_points(spec, d_eff, s)
    n1, n2 = _tube_frames(spec, d_eff, s)
    surface = spec.body_radius * (np.cos(psi)[:, None] * n1 + np.sin(psi)[:, None] * n2)
    return centers + surface + noise


def _grid_configs(spec: RobotSpec, grid) -> np.ndarray:
    levels = [np.linspace(spec.d_min, spec.d_max, int(c)) for c in grid]
    combos = list(itertools.product(*levels))
    return np.array(combos, dtype=float)


def build_dataset(spec: RobotSpec, grid, approaches: int, points_per_subcloud: int,
                  test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Enumerate the configuration grid and capture clouds for every config.

    Each config's ground-truth cloud concatenates ``approaches`` captures
    from independently drawn random start configurations. Configs are then
    split into train/test uniformly at random. Per-config random streams
    are derived from (seed, config index), so generation is reproducible
    and order-independent.
    """
    if approaches < 2:
        raise InvalidInputError("need at least 2 approaches per config")
    configs = _grid_configs(spec, grid)
    n = configs.shape[0]
    if n < 10:
        raise InvalidInputError(f"grid has {n} configs, need at least 10")

    entries = []
    for idx in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1, idx]))
        target = configs[idx]
        clouds = []
        for _ in range(approaches):
            start = rng.uniform(spec.d_min, spec.d_max, size=configs.shape[1])
            sub_seed = int(rng.integers(0, 2 ** 62))
            ctx = ApproachContext(start=start, target=target, seed=sub_seed)
            clouds.append(simulate_cloud(spec, ctx, points_per_subcloud))
        entries.append((target, np.concatenate(clouds, axis=0)))

    split_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    n_test = int(round(n * test_fraction))
    perm = split_rng.permutation(n)
    test_ids = set(perm[:n_test].tolist())
    train_entries, train_ids, test_entries, test_id_list = [], [], [], []
    for idx in range(n):
        if idx in test_ids:
            test_entries.append(entries[idx])
            test_id_list.append(idx)
        else:
            train_entries.append(entries[idx])
            train_ids.append(idx)
    return (Dataset(train_entries, "train", train_ids),
            Dataset(test_entries, "test", test_id_list))


# ---------------------------------------------------------------------------
# Dataset directory layout: manifest.txt plus one CSV per config.
# ---------------------------------------------------------------------------

def save_dataset(directory, train: Dataset, test: Dataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for ds, tag in ((train, "train"), (test, "test")):
        ids = ds.ids if ds.ids is not None else range(len(ds.entries))
        for idx, (config, cloud) in zip(ids, ds.entries):
            rows.append((idx, tag, config, cloud))
    rows.sort(key=lambda r: r[0])
    with open(directory / "manifest.txt", "w") as fh:
        for idx, tag, config, _ in rows:
            joined = " ".join(f"{v:.17g}" for v in config)
            fh.write(f"{idx} {tag} {joined}\n")
    for idx, _, _, cloud in rows:
        with open(directory / f"cloud_{idx}.csv", "w") as fh:
            fh.write("x,y,z\n")
            for p in cloud:
                fh.write(f"{p[0]:.17g},{p[1]:.17g},{p[2]:.17g}\n")


def load_dataset(directory) -> tuple[Dataset, Dataset]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise InvalidInputError(f"no manifest.txt under {directory}")
    train_entries, train_ids, test_entries, test_ids = [], [], [], []
    offset = 0
    for line in manifest.read_text().splitlines(keepends=True):
        fields = line.split()
        if len(fields) < 3:
            raise ParseError("manifest line needs '<id> <split> <d...>'", offset)
        try:
            idx = int(fields[0])
            config = np.array([float(v) for v in fields[2:]])
        except ValueError:
            raise ParseError("malformed manifest line", offset) from None
        if fields[1] not in ("train", "test"):
            raise ParseError(f"unknown split tag {fields[1]!r}", offset)
        offset += len(line.encode())
        cloud = _load_cloud(directory / f"cloud_{idx}.csv")
        if fields[1] == "train":
            train_entries.append((config, cloud))
            train_ids.append(idx)
        else:
            test_entries.append((config, cloud))
            test_ids.append(idx)
    return (Dataset(train_entries, "train", train_ids),
            Dataset(test_entries, "test", test_ids))


def _load_cloud(path: Path) -> np.ndarray:
    if not path.exists():
        raise InvalidInputError(f"missing cloud file {path}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 3:
        raise ParseError(f"cloud file {path.name} must have 3 columns", 0)
    return data
