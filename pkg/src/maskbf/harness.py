"""Experiment runner: scenarios x g multipliers x variations x scaling methods.

Each cell optimizes masks for one utterance and one (variation, g, scaling)
combination. Results are averaged over utterances into a table with two
baseline rows per g: the ideal MMSE filter and the unprocessed reference mic.
"""

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import optimize as op
from . import signal as sig
from .beamformers import VariationSpec
from .errors import MaskBFError, PlanError
from .scaling import ScalingMethod, ScalingSpec, scale_mdp

log = logging.getLogger(__name__)

FIXED_FILTER = "ideal-mmse"
TABLE_FIELDS = ("variation", "g", "scaling", "sdr_db", "utterances", "failed", "note")


@dataclass
class ExperimentPlan:
    """What to run. ``scenes`` is ``{"synthetic": {...}}`` or ``{"manifests": [...]}``."""

    scenes: dict
    variations: list
    g: list = field(default_factory=lambda: [1.0, 2.0, 4.0])
    scaling: list = field(default_factory=lambda: ["ideal"])
    config: op.OptimizationConfig = field(default_factory=op.OptimizationConfig)
    output_dir: str = "results"
    window_length: int = 256
    hop: int = 64
    reference_mic: int = 1

    def __post_init__(self):
        if not self.variations:
            raise PlanError("plan needs at least one variation")
        if not self.g:
            raise PlanError("plan needs at least one g multiplier")
        try:
            self.variations = [v if v == FIXED_FILTER else VariationSpec.parse(v).name
                               for v in self.variations]
            self.scaling = [ScalingSpec.parse(s) for s in self.scaling]
            self.g = [float(g) for g in self.g]
            if isinstance(self.config, dict):
                self.config = op.OptimizationConfig.from_dict(self.config)
            sig._validate(self.stft)
        except (ValueError, TypeError) as exc:
            raise PlanError(str(exc)) from exc
        if self.reference_mic < 1:
            raise PlanError("reference_mic is 1-based")
        if "synthetic" not in self.scenes and "manifests" not in self.scenes:
            raise PlanError("scenes must give 'synthetic' or 'manifests'")
        if "manifests" in self.scenes and not self.scenes["manifests"]:
            raise PlanError("empty manifest list")

    @property
    def stft(self):
        return sig.StftConfig(self.window_length, self.hop)

    @property
    def scene_count(self):
        if "manifests" in self.scenes:
            return len(self.scenes["manifests"])
        return int(self.scenes["synthetic"].get("count", 1))

    def to_dict(self):
        return {"scenes": self.scenes, "variations": list(self.variations), "g": self.g,
                "scaling": [_scaling_dict(s) for s in self.scaling],
                "config": self.config.to_dict(), "output_dir": str(self.output_dir),
                "window_length": self.window_length, "hop": self.hop,
                "reference_mic": self.reference_mic}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for old, new in (("g_list", "g"), ("output-dir", "output_dir"),
                         ("scenarios", "scenes"), ("reference-mic", "reference_mic")):
            if old in d:
                d[new] = d.pop(old)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise PlanError(f"unknown plan fields {sorted(unknown)}")
        if "scenes" not in d or "variations" not in d:
            raise PlanError("plan needs 'scenes' and 'variations'")
        return cls(**d)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise PlanError(f"cannot read plan {path}: {exc}") from exc
        if "scenes" in data and "manifests" in data["scenes"]:
            data["scenes"] = dict(data["scenes"], manifests=[
                str((path.parent / m).resolve()) for m in data["scenes"]["manifests"]])
        return cls.from_dict(data)


def _scaling_dict(s):
    out = {"method": s.method.value}
    if s.constraint is not None:
        out["constraint"] = s.constraint.value
    return out


@dataclass
class ResultTable:
    rows: list
    cells: list

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TABLE_FIELDS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row.get(k, "") for k in TABLE_FIELDS})

    def to_json(self, path):
        Path(path).write_text(json.dumps({"rows": self.rows, "cells": self.cells}, indent=2))

    def lookup(self, variation, g, scaling=None):
        for row in self.rows:
            if row["variation"] == variation and row["g"] == g and (
                    scaling is None or row["scaling"] == scaling):
                return row
        raise KeyError((variation, g, scaling))


# ---------------------------------------------------------------- scenes

def _scene_waves(scenes, index):
    if "manifests" in scenes:
        target, noise, _, _ = sig.read_manifest(scenes["manifests"][index])
        return target, noise, Path(scenes["manifests"][index]).stem
    syn = scenes["synthetic"]
    seed = int(syn.get("seed", 0)) + index
    target, noise = sig.synth_scene(seed, n_mics=int(syn.get("mics", 3)),
                                    n_sources=int(syn.get("sources", 3)),
                                    duration=float(syn.get("duration", 2.0)),
                                    sample_rate=int(syn.get("sample_rate", 16000)),
                                    snr_db=float(syn.get("snr_db", 5.0)))
    return target, noise, f"synth{seed}"


@lru_cache(maxsize=8)
def _scenario(scenes_json, index, g, window_length, hop, k):
    target, noise, name = _scene_waves(json.loads(scenes_json), index)
    return sig.mix_scenario(target, noise, g, k, sig.StftConfig(window_length, hop), name)


def _stem(name, g, variation, scaling):
    label = ScalingSpec.parse(scaling).label.replace(":", "-")
    return f"{name}_g{g:g}_{variation}_{label}"


def _run_cell(payload):
    """Execute one cell; returns a JSON-friendly dict (never raises)."""
    plan = ExperimentPlan.from_dict(payload["plan"])
    index, g, variation = payload["index"], payload["g"], payload["variation"]
    scaling = ScalingSpec.parse(payload["scaling"])
    out = {"index": index, "g": g, "variation": variation, "scaling": scaling.label}
    try:
        scenario = _scenario(json.dumps(plan.scenes, sort_keys=True), index, g,
                             plan.window_length, plan.hop, plan.reference_mic - 1)
        out["scene"] = scenario.name
        if variation == FIXED_FILTER:
            record = _fixed_filter_cell(scenario, scaling, plan.config)
        elif scaling.method is ScalingMethod.MASK_BASED:
            record = op.optimize_joint(scenario, variation, scaling.constraint, plan.config)
        else:
            record = op.optimize_filter_masks(scenario, variation, scaling, plan.config)
        if isinstance(record, op.RunRecord):
            path = record.save(Path(plan.output_dir) / "records",
                               _stem(scenario.name, g, variation, scaling))
            out.update(sdr_db=record.sdr_db, warnings=record.warnings, record=str(path),
                       failed=record.aborted)
        else:
            out.update(sdr_db=record, warnings=[], failed=False)
    except (MaskBFError, ValueError, np.linalg.LinAlgError, OSError) as exc:
        out.update(sdr_db=None, failed=True, warnings=[f"{type(exc).__name__}: {exc}"])
    return out


def _fixed_filter_cell(scenario, scaling, config):
    sdr_ideal, bank = op.ideal_mmse_sdr(scenario)
    if scaling.method is ScalingMethod.MASK_BASED:
        return op.optimize_scaling_mask(scenario, bank, scaling.constraint, config)
    if scaling.method is ScalingMethod.IDEAL:
        return sdr_ideal
    if scaling.method is ScalingMethod.MDP:
        x = scenario.observation.per_freq()
        y = np.einsum("fn,ftn->ft", np.conj(bank.w), x)
        return op.fixed_filter_sdr(scenario, bank.w, scale_mdp(y, x[..., scenario.ref_mic]))
    raise MaskBFError(f"scaling {scaling.label} not supported for the fixed filter")


def _baselines(plan, index, g):
    scenario = _scenario(json.dumps(plan.scenes, sort_keys=True), index, g,
                         plan.window_length, plan.hop, plan.reference_mic - 1)
    return scenario.name, op.ideal_mmse_sdr(scenario)[0], op.mic_sdr(scenario)


def _mean_row(variation, g, scaling, cells):
    good = [c["sdr_db"] for c in cells if not c["failed"] and c["sdr_db"] is not None]
    failed = len(cells) - len(good)
    notes = sorted({w for c in cells for w in c.get("warnings", [])})
    return {"variation": variation, "g": g, "scaling": scaling,
            "sdr_db": float(np.mean(good)) if good else None,
            "utterances": len(good), "failed": failed,
            "note": "; ".join(notes)[:500]}


def run_experiment(plan, jobs=1):
    """Run every cell of ``plan``, write ``table.csv``/``table.json`` and return the table."""
    if isinstance(plan, dict):
        plan = ExperimentPlan.from_dict(plan)
    out_dir = Path(plan.output_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PlanError(f"output dir not writable: {exc}") from exc
    plan_dict = plan.to_dict()
    payloads = [{"plan": plan_dict, "index": i, "g": g, "variation": v,
                 "scaling": _scaling_dict(s)}
                for v in plan.variations for g in plan.g for s in plan.scaling
                for i in range(plan.scene_count)]
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, payloads))
    else:
        cells = [_run_cell(p) for p in payloads]

    rows = []
    for v in plan.variations:
        for g in plan.g:
            for s in plan.scaling:
                group = [c for c in cells if c["variation"] == v and c["g"] == g
                         and c["scaling"] == s.label]
                rows.append(_mean_row(v, g, s.label, group))
    base_cells = []
    for g in plan.g:
        ideal, mic = [], []
        for i in range(plan.scene_count):
            name, sdr_ideal, sdr_mic = _baselines(plan, i, g)
            ideal.append({"sdr_db": sdr_ideal, "failed": False})
            mic.append({"sdr_db": sdr_mic, "failed": False})
            base_cells.append({"index": i, "scene": name, "g": g,
                               "ideal_mmse_db": sdr_ideal, "mic_db": sdr_mic})
        rows.append(_mean_row("ideal-mmse-baseline", g, "-", ideal))
        rows.append(_mean_row("mic", g, "-", mic))
    table = ResultTable(rows, cells + base_cells)
    table.to_csv(out_dir / "table.csv")
    table.to_json(out_dir / "table.json")
    (out_dir / "plan.json").write_text(json.dumps(plan_dict, indent=2))
    return table


def emit_curves(records, path):
    """Write per-iteration loss (and recorded SDR) for each run as CSV.

    ``records`` are RunRecords or their dict form. No records gives an empty file.
    """
    path = Path(path)
    records = list(records)
    with open(path, "w", newline="") as fh:
        if not records:
            return path
        writer = csv.writer(fh)
        writer.writerow(["variation", "scene", "scaling", "iteration", "loss", "sdr_db"])
        for rec in records:
            d = rec.to_dict() if hasattr(rec, "to_dict") else rec
            sdrs = {int(i): v for i, v in d.get("sdr_curve", [])}
            for it, loss in enumerate(d["loss_curve"], start=1):
                sdr_val = sdrs.get(it)
                writer.writerow([d["variation"], d.get("scene", ""), d.get("scaling", ""), it,
                                 repr(float(loss)), "" if sdr_val is None else repr(float(sdr_val))])
    return path


def iterations_to_reach(record, tolerance_db=0.1):
    """First recorded iteration whose SDR is within ``tolerance_db`` of the final SDR."""
    d = record.to_dict() if hasattr(record, "to_dict") else record
    final = d["sdr_db"]
    for it, value in d.get("sdr_curve", []):
        if abs(final - value) <= tolerance_db:
            return int(it)
    return int(d["iterations"])


def default_jobs():
    return max(1, (os.cpu_count() or 1))
