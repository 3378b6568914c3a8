"""Scene simulators and the on-disk dataset format.

Two generators: interacting charged particles in a reflecting box
(velocity-Verlet integration of a softened inverse-square pair force), and
a synthetic multi-level hierarchy whose aggregate series are exact sums of
bottom-level series. Both are pure functions of (config, seed).

Datasets persist as a directory: manifest.json (versioned), index.ndjson
(one record per scene) and scenes.bin (little-endian float64 blocks).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (ConfigError, DatasetError, DimensionError,
                     TruncatedBlobError, UnsupportedVersionError)
from .hierarchy import HierarchyTree, aggregate_targets, balanced_tree
from .seeding import make_rng

DATASET_FORMAT_VERSION = 1


@dataclass
class SceneRecord:
    """One training example: input window, target window, class labels."""

    scene_id: int
    split: str
    seed: int
    x: np.ndarray               # [S, T_in, D_in]
    y: np.ndarray               # [S, T_out, D_out]
    labels: tuple
    hierarchy: HierarchyTree | None = None

    def __post_init__(self):
        if len(self.labels) != self.x.shape[0]:
            raise DimensionError(
                f"scene {self.scene_id}: {len(self.labels)} labels for {self.x.shape[0]} series")
        if not (np.isfinite(self.x).all() and np.isfinite(self.y).all()):
            raise DatasetError(f"scene {self.scene_id} contains non-finite values")


# -- charged particles ---------------------------------------------------------

@dataclass
class ChargedConfig:
    n_particles: int = 5
    t_in: int = 80
    t_out: int = 20
    box_half_size: float = 5.0
    strength: float = 1.0
    step: float = 0.01
    substeps: int = 5           # leapfrog steps per recorded sample
    softening: float = 0.01     # floor on ||r||^3 in the pair force
    noise: float = 0.0          # observation noise std on recorded values
    charge_mode: str = "random"  # "random" | "balanced"
    positive_prob: float = 0.5
    initial_speed: float = 0.5

    def __post_init__(self):
        if self.n_particles < 2:
            raise ConfigError("charged simulator requires n_particles >= 2")
        if self.step <= 0:
            raise ConfigError("integration step must be positive")
        if self.charge_mode not in ("random", "balanced"):
            raise ConfigError(f"unknown charge_mode {self.charge_mode!r}")
        if self.t_in < 1 or self.t_out < 1:
            raise ConfigError("t_in and t_out must be >= 1")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _pair_forces(pos, charges, cfg: ChargedConfig):
    """Force on each particle; same charges repel, opposite attract."""
    delta = pos[:, None, :] - pos[None, :, :]            # r_i - r_j
    dist2 = (delta ** 2).sum(axis=-1)
    denom = np.maximum(dist2 ** 1.5, cfg.softening)
    np.fill_diagonal(denom, 1.0)
    qq = charges[:, None] * charges[None, :]
    np.fill_diagonal(qq, 0.0)
    coef = cfg.strength * qq / denom
    return (coef[:, :, None] * delta).sum(axis=1)


def _reflect(pos, vel, half):
    over = pos > half
    pos[over] = 2 * half - pos[over]
    vel[over] = -vel[over]
    under = pos < -half
    pos[under] = -2 * half - pos[under]
    vel[under] = -vel[under]


def total_energy(pos, vel, charges, cfg: ChargedConfig) -> float:
    """Kinetic plus softened pair potential (continuous at the force floor)."""
    kinetic = 0.5 * float((vel ** 2).sum())
    r0 = cfg.softening ** (1.0 / 3.0)
    potential = 0.0
    n = pos.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            r = float(np.linalg.norm(pos[i] - pos[j]))
            qq = cfg.strength * charges[i] * charges[j]
            if r >= r0:
                potential += qq / r
            else:
                potential += qq * (1.5 / r0 - r * r / (2.0 * cfg.softening))
    return kinetic + potential


def simulate_charged(cfg: ChargedConfig, seed: int, scene_id: int = 0,
                     split: str = "train") -> SceneRecord:
    """Integrate one scene; class label is the sign of each charge.

    The scene's random stream is derived from (seed, scene_id), so scenes of
    one dataset are independent and individually reproducible.
    """
    rng = make_rng(seed, scene_id)
    n = cfg.n_particles
    if cfg.charge_mode == "balanced":
        n_pos = max(1, min(n - 1, round(cfg.positive_prob * n)))
        charges = np.array([1.0] * n_pos + [-1.0] * (n - n_pos))
        rng.shuffle(charges)
    else:
        charges = np.where(rng.random(n) < cfg.positive_prob, 1.0, -1.0)
    pos = rng.uniform(-0.5 * cfg.box_half_size, 0.5 * cfg.box_half_size, size=(n, 2))
    vel = rng.standard_normal((n, 2)) * cfg.initial_speed

    t_total = cfg.t_in + cfg.t_out
    traj = np.zeros((n, t_total, 2))
    velo = np.zeros((n, t_total, 2))
    acc = _pair_forces(pos, charges, cfg)
    for t in range(t_total):
        traj[:, t] = pos
        velo[:, t] = vel
        for _ in range(cfg.substeps):
            vel = vel + 0.5 * cfg.step * acc
            pos = pos + cfg.step * vel
            _reflect(pos, vel, cfg.box_half_size)
            acc = _pair_forces(pos, charges, cfg)
            vel = vel + 0.5 * cfg.step * acc

    x = np.concatenate([traj[:, : cfg.t_in], velo[:, : cfg.t_in]], axis=-1)
    y = traj[:, cfg.t_in:].copy()
    if cfg.noise > 0:
        x = x + rng.standard_normal(x.shape) * cfg.noise
        y = y + rng.standard_normal(y.shape) * cfg.noise
    labels = tuple(int(c) for c in charges)
    return SceneRecord(scene_id, split, seed, x, y, labels)


def build_charged_dataset(cfg: ChargedConfig, counts: dict, master_seed: int):
    """Scenes for each split; scene ids are disjoint across splits."""
    records = []
    scene_id = 0
    for split in ("train", "val", "test"):
        for _ in range(counts.get(split, 0)):
            records.append(simulate_charged(cfg, seed=master_seed, scene_id=scene_id, split=split))
            scene_id += 1
    return records


# -- hierarchical synthetic ----------------------------------------------------

@dataclass
class HierSynthConfig:
    fanouts: tuple = (3, 4, 4)   # tree levels = len(fanouts) + 1
    t_total: int = 220           # observed periods T
    horizon: int = 8             # forecast periods per window
    t_in: int = 24
    class_level: int = 1         # tree depth whose nodes define the classes
    window_stride: int = 4
    trend_scale: float = 0.02
    season_period: float = 24.0
    class_factor_scale: float = 1.0
    noise: float = 0.1

    def __post_init__(self):
        if len(self.fanouts) < 2:
            raise ConfigError("hierarchy needs at least 3 levels (>= 2 fanouts)")
        if not (1 <= self.class_level <= len(self.fanouts)):
            raise ConfigError("class_level must be an internal tree depth")
        min_t = self.t_in + 3 * self.horizon
        if self.t_total < min_t:
            raise ConfigError(f"t_total must be >= t_in + 3*horizon = {min_t}")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["fanouts"] = list(self.fanouts)
        return d


def generate_hier_synth(cfg: HierSynthConfig, seed: int):
    """Bottom series from class-shared factors plus idiosyncratic terms.

    Returns (records, tree): train windows over 1..T-2*horizon, one
    validation window ending at T-horizon, one test window ending at T.
    Splits are disjoint in time.
    """
    tree = balanced_tree(cfg.fanouts)
    depths = tree.depths()
    leaf_nodes = [i for i in range(tree.n_nodes) if tree.leaf_rows[i] != -1]
    leaf_nodes.sort(key=lambda i: tree.leaf_rows[i])
    classes = [tree.ancestor_at_depth(node, cfg.class_level) for node in leaf_nodes]
    n_leaves = len(leaf_nodes)

    rng = make_rng(seed)
    t_axis = np.arange(cfg.t_total, dtype=float)
    class_ids = sorted(set(classes))
    factors = {}
    for cid in class_ids:
        amp = rng.uniform(0.5, 1.5, size=2) * cfg.class_factor_scale
        phase = rng.uniform(0, 2 * np.pi, size=2)
        factors[cid] = (amp[0] * np.sin(2 * np.pi * t_axis / cfg.season_period + phase[0])
                        + amp[1] * np.sin(4 * np.pi * t_axis / cfg.season_period + phase[1]))
    slopes = rng.uniform(-1.0, 1.0, size=n_leaves) * cfg.trend_scale
    bottom = np.zeros((n_leaves, cfg.t_total))
    for row in range(n_leaves):
        bottom[row] = (factors[classes[row]] + slopes[row] * t_axis
                       + cfg.noise * rng.standard_normal(cfg.t_total))

    labels = tuple(int(c) for c in classes)
    tau, t_in = cfg.horizon, cfg.t_in
    records = []
    scene_id = 0

    def window(split, start, sid):
        x = bottom[:, start:start + t_in, None].copy()
        y = bottom[:, start + t_in:start + t_in + tau, None].copy()
        return SceneRecord(sid, split, seed, x, y, labels, hierarchy=tree)

    train_last = cfg.t_total - 2 * tau  # training data ends here (exclusive)
    for start in range(0, train_last - tau - t_in + 1, cfg.window_stride):
        records.append(window("train", start, scene_id))
        scene_id += 1
    records.append(window("val", cfg.t_total - tau - t_in - tau, scene_id))
    scene_id += 1
    records.append(window("test", cfg.t_total - tau - t_in, scene_id))
    return records, tree


# -- persistence ---------------------------------------------------------------

def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def save_dataset(records, path, config_echo=None, master_seed=None, tool_version="0.1.0"):
    os.makedirs(path, exist_ok=True)
    tree = None
    for rec in records:
        if rec.hierarchy is not None:
            tree = rec.hierarchy
            break
    counts = {}
    for rec in records:
        counts[rec.split] = counts.get(rec.split, 0) + 1
    echo = config_echo or {}
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "tool_version": tool_version,
        "dtype": "f64",
        "byte_order": "little",
        "layout": "row-major [S, T, D]",
        "counts": counts,
        "seed": master_seed,
        "config": echo,
        "config_hash": config_hash(echo),
        "hierarchy": tree.to_dict() if tree is not None else None,
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    offset = 0
    with open(os.path.join(path, "scenes.bin"), "wb") as blob, \
            open(os.path.join(path, "index.ndjson"), "w", encoding="utf-8") as index:
        for rec in records:
            x = np.ascontiguousarray(rec.x, dtype="<f8")
            y = np.ascontiguousarray(rec.y, dtype="<f8")
            payload = x.tobytes() + y.tobytes()
            blob.write(payload)
            entry = {
                "scene_id": rec.scene_id,
                "split": rec.split,
                "seed": rec.seed,
                "labels": list(rec.labels),
                "x_shape": list(x.shape),
                "y_shape": list(y.shape),
                "offset": offset,
                "nbytes": len(payload),
            }
            index.write(json.dumps(entry) + "\n")
            offset += len(payload)


def load_dataset(path):
    """Returns (records, manifest); fails loudly on malformed input."""
    try:
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"no manifest.json under {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest under {path}: {exc}") from None
    version = manifest.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"dataset format version {version!r} is not supported (expected {DATASET_FORMAT_VERSION})")
    tree = None
    if manifest.get("hierarchy"):
        tree = HierarchyTree.from_dict(manifest["hierarchy"])
    blob = open(os.path.join(path, "scenes.bin"), "rb").read()
    records = []
    with open(os.path.join(path, "index.ndjson"), encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"corrupt index line: {exc}") from None
            start, nbytes = entry["offset"], entry["nbytes"]
            if start + nbytes > len(blob):
                raise TruncatedBlobError(
                    f"scene {entry['scene_id']}: blob truncated "
                    f"(needs bytes [{start}, {start + nbytes}), have {len(blob)})",
                    scene_id=entry["scene_id"])
            x_shape = tuple(entry["x_shape"])
            y_shape = tuple(entry["y_shape"])
            x_count = int(np.prod(x_shape))
            y_count = int(np.prod(y_shape))
            if (x_count + y_count) * 8 != nbytes:
                raise DatasetError(
                    f"scene {entry['scene_id']}: payload size {nbytes} does not match "
                    f"shapes {x_shape} + {y_shape}")
            arr = np.frombuffer(blob, dtype="<f8", count=x_count + y_count, offset=start)
            records.append(SceneRecord(
                entry["scene_id"], entry["split"], entry["seed"],
                arr[:x_count].reshape(x_shape).copy(),
                arr[x_count:].reshape(y_shape).copy(),
                tuple(entry["labels"]),
                hierarchy=tree))
    return records, manifest


# -- standardization -----------------------------------------------------------

@dataclass
class Standardization:
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray
    flags: list = field(default_factory=list)

    def apply_x(self, x):
        return (x - self.x_mean) / self.x_scale

    def apply_y(self, y):
        return (y - self.y_mean) / self.y_scale

    def invert_mean(self, mean):
        return mean * self.y_scale + self.y_mean

    def invert_forecast(self, forecast):
        from .distribution import GaussianForecast

        mean = forecast.mean * self.y_scale + self.y_mean
        cov = forecast.cov * (self.y_scale ** 2)
        return GaussianForecast(mean, cov)

    def to_dict(self):
        return {
            "x_mean": self.x_mean.tolist(), "x_scale": self.x_scale.tolist(),
            "y_mean": self.y_mean.tolist(), "y_scale": self.y_scale.tolist(),
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["x_mean"]), np.array(d["x_scale"]),
                   np.array(d["y_mean"]), np.array(d["y_scale"]), list(d["flags"]))

    @classmethod
    def identity(cls, d_in, d_out):
        return cls(np.zeros(d_in), np.ones(d_in), np.zeros(d_out), np.ones(d_out))


def standardize(records, center=None):
    """Per-channel affine standardization fit on the training split only.

    Returns (new_records, stats). Zero-variance channels pass through with a
    unit scale and a warning flag. For hierarchical datasets centering is
    disabled (scale only) so that standardization commutes with aggregation
    by sums; pass ``center`` explicitly to override.
    """
    train = [r for r in records if r.split == "train"]
    if not train:
        raise DatasetError("standardize needs a non-empty training split")
    if center is None:
        center = all(r.hierarchy is None for r in records)
    x_all = np.concatenate([r.x.reshape(-1, r.x.shape[-1]) for r in train], axis=0)
    y_all = np.concatenate([r.y.reshape(-1, r.y.shape[-1]) for r in train], axis=0)
    flags = []
    if not center:
        flags.append("centering disabled (aggregation by sums)")

    def fit(mat, tag):
        mean = mat.mean(axis=0)
        std = mat.std(axis=0) if center else np.sqrt((mat ** 2).mean(axis=0))
        for ch, s in enumerate(std):
            if s < 1e-12:
                flags.append(f"zero-variance {tag} channel {ch}: unit scale")
        scale = np.where(std < 1e-12, 1.0, std)
        if center:
            mean = np.where(std < 1e-12, 0.0, mean)  # constant channels pass through
        else:
            mean = np.zeros_like(mean)
        return mean, scale

    x_mean, x_scale = fit(x_all, "input")
    y_mean, y_scale = fit(y_all, "target")
    stats = Standardization(x_mean, x_scale, y_mean, y_scale, flags)
    out = [replace(r, x=stats.apply_x(r.x), y=stats.apply_y(r.y)) for r in records]
    return out, stats
