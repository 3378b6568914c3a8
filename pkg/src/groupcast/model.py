"""Feature extractor over grouped series and the full forecasting model.

One layer applies three attention passes to the padded [B, C, S_c, T, D]
tensor: within each class across its real series (intra-class), across
class summaries pooled by attention (inter-class, broadcast back over
slots), and along time per real series. The intra- and inter-class passes
read the same layer input and are combined by addition before the time
pass. Classes are processed in batches keyed by their real size, so padded
slots never enter any attention set.

Variants: "full" keeps all three passes; "wo-class" drops the inter-class
pass and treats every series as one class; "attT" keeps only the time pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import ISAB, PMA, SAB, AttentionConfig, Linear
from .distribution import GaussianForecast, KernelHeads, MeanHead
from .errors import ConfigError, DimensionError
from .grouping import GroupMeta, group_batch, group_meta
from .hierarchy import HierarchyTree, aggregate_features
from .seeding import make_rng
from .tensor import Parameter

VARIANTS = ("full", "wo-class", "attT")
SET_BLOCKS = ("sab", "isab")


@dataclass
class ModelConfig:
    t_in: int
    t_out: int
    d_in: int
    d_out: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    variant: str = "full"
    set_block: str = "sab"
    inducing_points: int = 20
    d_kernel: int = 16
    dtype: str = "f64"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.set_block not in SET_BLOCKS:
            raise ConfigError(f"unknown set_block {self.set_block!r}; expected one of {SET_BLOCKS}")
        if self.t_in < 1 or self.t_out < 1:
            raise ConfigError("t_in and t_out must be >= 1")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError("dtype must be 'f32' or 'f64'")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def sinusoidal_encoding(t_len, d_model, dtype=np.float64):
    """Standard fixed sin/cos table [t_len, d_model]."""
    pos = np.arange(t_len, dtype=np.float64)[:, None]
    i = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc.astype(dtype)


def _make_set_block(cfg: ModelConfig, att: AttentionConfig, rng, name):
    if cfg.set_block == "isab":
        return ISAB(att, rng, name, m=cfg.inducing_points)
    return SAB(att, rng, name)


class Layer3D:
    """One stack element: intra-class, inter-class and temporal attention."""

    def __init__(self, cfg: ModelConfig, rng, name):
        att = AttentionConfig(cfg.d_model, cfg.n_heads, cfg.np_dtype)
        self.variant = cfg.variant
        self.blocks = []
        if cfg.variant != "attT":
            self.sc_block = _make_set_block(cfg, att, rng, f"{name}.sc")
            self.blocks.append(self.sc_block)
        if cfg.variant == "full":
            self.c_pool = PMA(att, rng, f"{name}.pool", k=1)
            self.c_block = _make_set_block(cfg, att, rng, f"{name}.c")
            self.blocks += [self.c_pool, self.c_block]
        self.t_block = SAB(att, rng, f"{name}.t")
        self.blocks.append(self.t_block)

    def params(self):
        out = []
        for b in self.blocks:
            out.extend(b.params())
        return out

    # m: Tensor [B, C, S_c, T, D]
    def __call__(self, m, meta: GroupMeta):
        if self.variant == "attT":
            return self._time_pass(m, meta)
        h = self._intra_class_pass(m, meta)
        if self.variant == "full":
            h = h + self._inter_class_pass(m, meta)
        return self._time_pass(h, meta)

    def _per_size(self, m, meta, fn):
        """Apply fn to each same-size batch of classes; padded slots excluded."""
        b, c, s_cap, t_len, d = m.shape
        parts = []
        for s, cls_idx in sorted(meta.size_groups.items()):
            sub = T.take(m, cls_idx, axis=1) if len(cls_idx) != c else m
            sub = sub[:, :, :s] if s != s_cap else sub
            k = len(cls_idx)
            sub = T.transpose(sub, (0, 1, 3, 2, 4))            # [B, k, T, s, D]
            sub = T.reshape(sub, (b * k * t_len, s, d))
            parts.append((s, cls_idx, k, fn(sub)))
        return parts

    def _intra_class_pass(self, m, meta):
        b, c, s_cap, t_len, d = m.shape
        outs = []
        for s, cls_idx, k, y in self._per_size(m, meta, self.sc_block):
            y = T.reshape(y, (b, k, t_len, s, d))
            y = T.transpose(y, (0, 1, 3, 2, 4))                # [B, k, s, T, D]
            if s != s_cap:
                y = T.scatter(y, np.arange(s), axis=2, size=s_cap)
            if k != c:
                y = T.scatter(y, cls_idx, axis=1, size=c)
            outs.append(y)
        result = outs[0]
        for y in outs[1:]:
            result = result + y
        return result

    def _inter_class_pass(self, m, meta):
        b, c, s_cap, t_len, d = m.shape
        pooled_parts = []
        for s, cls_idx, k, y in self._per_size(m, meta, self.c_pool):
            y = T.reshape(y, (b, k, t_len, d))                 # k=1 seed squeezed by reshape
            if k != c:
                y = T.scatter(y, cls_idx, axis=1, size=c)
            pooled_parts.append(y)
        pooled = pooled_parts[0]
        for y in pooled_parts[1:]:
            pooled = pooled + y                                 # [B, C, T, D]
        att = T.transpose(pooled, (0, 2, 1, 3))                 # [B, T, C, D]
        att = T.reshape(att, (b * t_len, c, d))
        att = self.c_block(att)
        att = T.transpose(T.reshape(att, (b, t_len, c, d)), (0, 2, 1, 3))
        att = T.reshape(att, (b, c, 1, t_len, d))
        return T.broadcast_to(att, (b, c, s_cap, t_len, d))     # constant along slots

    def _time_pass(self, m, meta):
        b, c, s_cap, t_len, d = m.shape
        flat = T.reshape(m, (b, c * s_cap, t_len, d))
        real = T.take(flat, meta.real_flat, axis=1)             # [B, S, T, D]
        n_series = meta.n_series
        y = self.t_block(T.reshape(real, (b * n_series, t_len, d)))
        y = T.reshape(y, (b, n_series, t_len, d))
        y = T.scatter(y, meta.real_flat, axis=1, size=c * s_cap)
        return T.reshape(y, (b, c, s_cap, t_len, d))


class FeatureExtractor:
    """Embed, run the attention stack, unpad, and pool time to the horizon."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        dt = cfg.np_dtype
        self.embed = Linear(cfg.d_in, cfg.d_model, rng, "embed", dt)
        self.pe = sinusoidal_encoding(cfg.t_in, cfg.d_model, dt)
        self.layers = [Layer3D(cfg, rng, f"layer{i}") for i in range(cfg.n_layers)]
        self.time_w = Parameter(
            T.uniform_init(rng, cfg.t_in, cfg.t_out, (cfg.t_in, cfg.t_out), dt), "time_pool.weight")
        self.time_b = Parameter(np.zeros(cfg.t_out, dtype=dt), "time_pool.bias")

    def params(self):
        out = self.embed.params()
        for layer in self.layers:
            out.extend(layer.params())
        out += [self.time_w, self.time_b]
        return out

    def effective_labels(self, labels):
        """Class labels actually used: collapsed to one class off the full variant."""
        if self.cfg.variant == "full":
            return tuple(labels)
        return (0,) * len(tuple(labels))

    def extract(self, xb, labels):
        """xb [B, S, T_in, D_in] (or [S, T_in, D_in]) -> Z [B, S, T_out, D_model]."""
        xb = np.asarray(xb, dtype=self.cfg.np_dtype)
        single = xb.ndim == 3
        if single:
            xb = xb[None]
        if xb.shape[2] != self.cfg.t_in or xb.shape[3] != self.cfg.d_in:
            raise DimensionError(
                f"input window {xb.shape[2:]} does not match config "
                f"({self.cfg.t_in}, {self.cfg.d_in})")
        meta = group_meta(self.effective_labels(labels))
        grouped = group_batch(xb, meta)
        z = self.extract_grouped(grouped, meta)
        return z[0] if single else z

    def extract_grouped(self, grouped_values, meta: GroupMeta):
        """Run from an already-grouped [B, C, S_c, T, D_in] array.

        Padded slot contents are arbitrary; they never reach any attention
        set, so real-slot outputs do not depend on them.
        """
        m = self.embed(T.as_tensor(grouped_values)) + T.Tensor(self.pe)
        for layer in self.layers:
            m = layer(m, meta)
        b, c, s_cap, t_len, d = m.shape
        flat = T.reshape(m, (b, c * s_cap, t_len, d))
        z = T.take(flat, meta.real_flat, axis=1)                # original series order
        # learned affine combination of input steps, shared across series/channels
        z = T.transpose(z, (0, 1, 3, 2))                        # [B, S, D, T_in]
        z = T.matmul(z, self.time_w) + T.reshape(self.time_b, (1, self.cfg.t_out))
        return T.transpose(z, (0, 1, 3, 2))                     # [B, S, T_out, D]


class Forecaster:
    """Feature extractor plus Gaussian heads; optionally aggregates features
    over a hierarchy before the heads."""

    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        rng = make_rng(seed, 0)
        self.extractor = FeatureExtractor(cfg, rng)
        self.mean_head = MeanHead(cfg.d_model, cfg.d_out, rng, dtype=cfg.np_dtype)
        self.kernel_heads = KernelHeads(
            cfg.d_model, cfg.d_out, rng,
            d_r=cfg.d_kernel, d_l=cfg.d_kernel, d_sigma=cfg.d_kernel, dtype=cfg.np_dtype)
        self.init_seed = seed
        self.fault_bias = 0.0  # test-only equivariance fault injection

    def params(self):
        return self.extractor.params() + self.mean_head.params() + self.kernel_heads.params()

    def param_groups(self):
        groups = {}
        for p in self.params():
            groups.setdefault(p.name.split(".")[0], []).append(p)
        return groups

    def features(self, xb, labels, tree: HierarchyTree | None = None):
        z = self.extractor.extract(xb, labels)
        if self.fault_bias:
            s_axis = z.ndim - 3
            bias = np.arange(z.shape[s_axis]).reshape(
                (1,) * s_axis + (-1,) + (1, 1)) * self.fault_bias
            z = z + T.Tensor(bias.astype(z.data.dtype))
        if tree is not None:
            if z.ndim == 4:
                z = T.transpose(aggregate_features(
                    T.transpose(z, (1, 0, 2, 3)), tree), (1, 0, 2, 3))
            else:
                z = aggregate_features(z, tree)
        return z

    def predict(self, x, labels, tree=None) -> GaussianForecast:
        """Single-scene forecast as plain arrays (no tape)."""
        with T.no_grad():
            z = self.features(np.asarray(x)[None], labels, tree=tree)
            mean = self.mean_head(z).data[0]
            cov = self.kernel_heads(z).data[0]
        return GaussianForecast(mean, cov)

    def loss(self, xb, labels, yb, kind="nll", tree=None):
        """Batched training loss; yb rows must match the head output rows."""
        from .distribution import mae_loss, nll_loss

        z = self.features(xb, labels, tree=tree)
        mean = self.mean_head(z)
        if kind == "mae":
            return mae_loss(yb, mean)
        if kind != "nll":
            raise ConfigError(f"unknown loss kind {kind!r}")
        cov = self.kernel_heads(z)
        return nll_loss(yb, mean, cov)


# -- checkpoint io -------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: Forecaster, path, extra=None):
    """Write manifest.json + params.bin (flat little-endian values)."""
    import os

    os.makedirs(path, exist_ok=True)
    params = model.params()
    entries = []
    offset = 0
    dtype_name = model.cfg.dtype
    itemsize = np.dtype(model.cfg.np_dtype).itemsize
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        for p in params:
            arr = np.ascontiguousarray(p.data, dtype=model.cfg.np_dtype)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            fh.write(le.tobytes())
            entries.append({"name": p.name, "shape": list(p.shape), "offset": offset})
            offset += arr.size * itemsize
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "precision": dtype_name,
        "model_config": model.cfg.to_dict(),
        "init_seed": model.init_seed,
        "jitter_rule": {"relative": 1e-6, "floor": 1e-8},
        "parameters": entries,
        "total_bytes": offset,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Rebuild a Forecaster (and the manifest dict) from disk."""
    import os

    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(
            f"unsupported checkpoint version {manifest.get('format_version')!r}")
    cfg = ModelConfig.from_dict(manifest["model_config"])
    model = Forecaster(cfg, seed=manifest.get("init_seed", 0))
    blob = open(os.path.join(path, "params.bin"), "rb").read()
    itemsize = np.dtype(cfg.np_dtype).itemsize
    by_name = {p.name: p for p in model.params()}
    for entry in manifest["parameters"]:
        p = by_name[entry["name"]]
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        raw = blob[start:start + n * itemsize]
        if len(raw) != n * itemsize:
            raise ConfigError(f"checkpoint blob truncated at parameter {entry['name']}")
        vals = np.frombuffer(raw, dtype=np.dtype(cfg.np_dtype).newbyteorder("<"))
        p.data[...] = vals.reshape(entry["shape"]).astype(cfg.np_dtype)
    return model, manifest
