"""Forecast metrics and evaluation protocols.

ADE/FDE follow the displacement-error convention for trajectories: root of
the mean squared Euclidean displacement over the whole horizon (ADE) or at
the final step only (FDE). NLL is the scene negative log likelihood summed
over (time, channel) slices; reported aggregates are means over scenes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .distribution import GaussianForecast, gaussian_nll
from .errors import DimensionError, ProtocolError
from .hierarchy import HierarchyTree, aggregate_targets
from .seeding import make_rng


def ade(pred, truth):
    """Average displacement error.

    Parameters
    ----------
    pred : array [S, T, D]
        Predicted trajectories.
    truth : array [S, T, D]
        Ground-truth trajectories.

    Returns
    -------
    float
        Root mean (over series and time) squared Euclidean displacement.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    sq = ((pred - truth) ** 2).sum(axis=-1)
    return float(np.sqrt(sq.mean()))


def fde(pred, truth):
    """Final displacement error: root mean squared displacement at the last step."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    sq = ((pred[:, -1] - truth[:, -1]) ** 2).sum(axis=-1)
    return float(np.sqrt(sq.mean()))


def nll_metric(y, forecast: GaussianForecast) -> float:
    """Scene NLL; delegates to the distribution module."""
    return gaussian_nll(y, forecast)


def per_level_metrics(y_all, forecast_all: GaussianForecast, tree: HierarchyTree):
    """RMSE of the mean and NLL of the marginal joint, grouped by tree depth.

    y_all and the forecast must be indexed by tree node (aggregates included).
    """
    y_all = np.asarray(y_all)
    if y_all.shape[0] != tree.n_nodes:
        raise ProtocolError(
            f"targets cover {y_all.shape[0]} nodes but tree has {tree.n_nodes}")
    if forecast_all.n_series != tree.n_nodes:
        raise ProtocolError(
            f"forecast covers {forecast_all.n_series} nodes but tree has {tree.n_nodes}")
    depths = tree.depths()
    table = {}
    for level in sorted(set(depths.tolist())):
        nodes = np.where(depths == level)[0]
        resid = forecast_all.mean[nodes] - y_all[nodes]
        rmse = float(np.sqrt((resid ** 2).mean()))
        marginal = GaussianForecast(
            forecast_all.mean[nodes], forecast_all.cov[np.ix_(nodes, nodes)])
        nll = gaussian_nll(y_all[nodes], marginal)
        table[int(level)] = {"rmse": rmse, "nll": nll, "n_nodes": int(nodes.size)}
    return table


@dataclass
class MetricReport:
    """Per-scene values plus aggregates; aggregates are means over scenes."""

    per_scene: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    config_echo: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    per_level: dict | None = None
    remove_grid: list | None = None

    def finalize(self):
        self.counts["scenes"] = len(self.per_scene)
        keys = [k for k in ("ade", "fde", "nll", "rmse") if self.per_scene and k in self.per_scene[0]]
        for k in keys:
            vals = [s[k] for s in self.per_scene if s.get(k) is not None]
            if any(not np.isfinite(v) for v in vals):
                self.flags.append(f"non-finite {k} present")
            self.aggregates[k] = float(np.mean(vals)) if vals else float("nan")
        return self

    def to_ndjson(self, path, header_extra=None):
        with open(path, "w", encoding="utf-8") as fh:
            head = {"record": "header", "counts": self.counts,
                    "config_echo": self.config_echo, "flags": self.flags}
            if header_extra:
                head.update(header_extra)
            fh.write(json.dumps(head) + "\n")
            for scene in self.per_scene:
                fh.write(json.dumps({"record": "scene", **scene}) + "\n")
            fh.write(json.dumps({"record": "aggregate", "metrics": self.aggregates}) + "\n")
            if self.per_level is not None:
                fh.write(json.dumps({"record": "per_level", "table": self.per_level}) + "\n")
            if self.remove_grid is not None:
                fh.write(json.dumps({"record": "remove_grid", "cells": self.remove_grid}) + "\n")

    @classmethod
    def from_ndjson(cls, path):
        report = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                kind = rec.pop("record")
                if kind == "header":
                    report.counts = rec.get("counts", {})
                    report.config_echo = rec.get("config_echo", {})
                    report.flags = rec.get("flags", [])
                elif kind == "scene":
                    report.per_scene.append(rec)
                elif kind == "aggregate":
                    report.aggregates = rec["metrics"]
                elif kind == "per_level":
                    report.per_level = {int(k): v for k, v in rec["table"].items()}
                elif kind == "remove_grid":
                    report.remove_grid = rec["cells"]
        return report

    def to_tsv(self, path):
        """Flat, fixed-precision table for CI diffing."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("kind\tscene_id\tmetric\tvalue\n")
            for scene in self.per_scene:
                sid = scene.get("scene_id", "")
                for k, v in scene.items():
                    if k != "scene_id" and isinstance(v, (int, float)):
                        fh.write(f"scene\t{sid}\t{k}\t{v:.12g}\n")
            for k, v in sorted(self.aggregates.items()):
                fh.write(f"aggregate\t\t{k}\t{v:.12g}\n")
            if self.per_level:
                for level, row in sorted(self.per_level.items()):
                    for k, v in sorted(row.items()):
                        fh.write(f"level{level}\t\t{k}\t{v:.12g}\n")
            if self.remove_grid:
                for cell in self.remove_grid:
                    tag = "remove" + "_".join(str(k) for k in cell["removed"])
                    for k, v in sorted(cell["metrics"].items()):
                        fh.write(f"{tag}\t\t{k}\t{v:.12g}\n")


def evaluate_scenes(model, records, stats=None, split="test", per_level=False,
                    config_echo=None) -> MetricReport:
    """Run the model over one split and collect metrics on the original scale."""
    report = MetricReport(config_echo=config_echo or {})
    subset = [r for r in records if r.split == split]
    for rec in subset:
        x = stats.apply_x(rec.x) if stats is not None else rec.x
        forecast = model.predict(x, rec.labels, tree=rec.hierarchy)
        if stats is not None:
            forecast = stats.invert_forecast(forecast)
        if rec.hierarchy is not None:
            y_all = aggregate_targets(rec.y, rec.hierarchy)
            resid = forecast.mean - y_all
            entry = {
                "scene_id": rec.scene_id,
                "rmse": float(np.sqrt((resid ** 2).mean())),
                "nll": nll_metric(y_all, forecast),
            }
            if per_level:
                table = per_level_metrics(y_all, forecast, rec.hierarchy)
                entry["per_level"] = table
            report.per_scene.append(entry)
        else:
            report.per_scene.append({
                "scene_id": rec.scene_id,
                "ade": ade(forecast.mean, rec.y),
                "fde": fde(forecast.mean, rec.y),
                "nll": nll_metric(rec.y, forecast),
            })
    if per_level and subset and subset[0].hierarchy is not None:
        levels = sorted({lv for s in report.per_scene for lv in s.get("per_level", {})})
        merged = {}
        for lv in levels:
            rows = [s["per_level"][lv] for s in report.per_scene if lv in s.get("per_level", {})]
            merged[lv] = {
                "rmse": float(np.mean([r["rmse"] for r in rows])),
                "nll": float(np.mean([r["nll"] for r in rows])),
                "n_nodes": rows[0]["n_nodes"],
            }
        report.per_level = merged
        for s in report.per_scene:
            s.pop("per_level", None)
    return report.finalize()


def remove_series_protocol(model, records, removal_spec, seed, stats=None,
                           split="test") -> MetricReport:
    """Evaluate the unmodified model on scenes with series removed per class.

    removal_spec: sequence of (class_label, max_removed) pairs; the grid is
    the cartesian product of 0..max_removed per class. Removed series are
    dropped from the model input and from the metrics.
    """
    removal_spec = list(removal_spec)
    subset = [r for r in records if r.split == split]
    if not subset:
        raise ProtocolError(f"no scenes in split {split!r}")
    grids = [range(mx + 1) for _, mx in removal_spec]
    cells = []
    for combo in _product(grids):
        per_scene = []
        audit = []
        for rec in subset:
            rng = make_rng(seed, *(list(combo) + [rec.scene_id]))
            keep = np.ones(len(rec.labels), dtype=bool)
            removed_ids = []
            for (label, _), k in zip(removal_spec, combo):
                members = [i for i, lab in enumerate(rec.labels) if lab == label]
                if k >= len(members) and k > 0:
                    raise ProtocolError(
                        f"removing {k} series would empty class {label!r} "
                        f"(size {len(members)}) in scene {rec.scene_id}")
                if k > 0:
                    drop = rng.choice(members, size=k, replace=False)
                    keep[drop] = False
                    removed_ids.extend(int(i) for i in drop)
            kept_idx = np.where(keep)[0]
            x = rec.x[kept_idx]
            labels = tuple(rec.labels[i] for i in kept_idx)
            xs = stats.apply_x(x) if stats is not None else x
            forecast = model.predict(xs, labels)
            if stats is not None:
                forecast = stats.invert_forecast(forecast)
            y = rec.y[kept_idx]
            per_scene.append({
                "scene_id": rec.scene_id,
                "ade": ade(forecast.mean, y),
                "fde": fde(forecast.mean, y),
                "nll": nll_metric(y, forecast),
            })
            audit.append({"scene_id": rec.scene_id, "removed": removed_ids,
                          "kept": [int(i) for i in kept_idx]})
        cell_metrics = {k: float(np.mean([s[k] for s in per_scene]))
                        for k in ("ade", "fde", "nll")}
        cells.append({"removed": list(combo), "metrics": cell_metrics, "audit": audit})
    report = MetricReport(remove_grid=cells,
                          counts={"scenes": len(subset), "cells": len(cells)})
    report.aggregates = {"cells": float(len(cells))}
    return report


def _product(ranges):
    if not ranges:
        yield ()
        return
    for head in ranges[0]:
        for tail in _product(ranges[1:]):
            yield (head,) + tail
