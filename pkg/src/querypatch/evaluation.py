"""Accuracy measurement, confusion matrices, and cross-oracle transfer grids.

Evaluation never mutates the dataset or the patch; every pose draw comes
from the supplied rng, so a fixed seed reproduces a report exactly.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import QuerypatchError
from .geometry import Patch, TransformConfig, apply_patch, sample_transform
from .oracle import Oracle
from .rng import Rng


@dataclass
class EvalReport:
    oracle_id: str
    dataset_tag: str
    n: int
    clean_accuracy: float
    patched_accuracy: float | None
    confusion_clean: np.ndarray  # (K, K) counts, rows = true class
    confusion_patched: np.ndarray | None
    transform: dict | None  # pose policy used for the patched pass
    seed: int | None
    patch_id: str | None = None  # which attack the patch came from, when known

    def to_dict(self) -> dict:
        return {
            "type": "eval_report",
            "oracle_id": self.oracle_id,
            "dataset_tag": self.dataset_tag,
            "n": self.n,
            "clean_accuracy": self.clean_accuracy,
            "patched_accuracy": self.patched_accuracy,
            "confusion_clean": self.confusion_clean.tolist(),
            "confusion_patched": (None if self.confusion_patched is None
                                  else self.confusion_patched.tolist()),
            "transform": self.transform,
            "seed": self.seed,
            "patch_id": self.patch_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            oracle_id=d["oracle_id"],
            dataset_tag=d["dataset_tag"],
            n=int(d["n"]),
            clean_accuracy=float(d["clean_accuracy"]),
            patched_accuracy=(None if d.get("patched_accuracy") is None
                              else float(d["patched_accuracy"])),
            confusion_clean=np.asarray(d["confusion_clean"], dtype=np.int64),
            confusion_patched=(None if d.get("confusion_patched") is None
                               else np.asarray(d["confusion_patched"], dtype=np.int64)),
            transform=d.get("transform"),
            seed=d.get("seed"),
            patch_id=d.get("patch_id"),
        )


def _confusion(labels: np.ndarray, preds: np.ndarray, k: int) -> np.ndarray:
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (labels, preds), 1)
    return m


def evaluate(oracle: Oracle, d: LabeledDataset, patch: Patch | None = None,
             transform: TransformConfig | None = None, rng: Rng | None = None,
             chunk: int = 512, patch_id: str | None = None) -> EvalReport:
    """Clean accuracy, plus patched accuracy when a patch is given.

    The patched pass samples one pose per image from ``transform`` using
    ``rng``.  Argmax ties resolve to the lowest class index.
    """
    if len(d) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if d.image_shape != oracle.input_shape:
        raise ValueError(
            f"dataset images are {d.image_shape}, oracle expects {oracle.input_shape}"
        )
    k = oracle.num_classes
    if int(d.labels.max()) >= k:
        raise ValueError(
            f"dataset has label {int(d.labels.max())} but oracle only has {k} classes"
        )

    preds_clean = np.empty(len(d), dtype=np.int64)
    for start in range(0, len(d), chunk):
        probs = oracle.classify_batch(d.images[start:start + chunk])
        preds_clean[start:start + len(probs)] = probs.argmax(axis=1)
    clean_acc = float((preds_clean == d.labels).mean())
    conf_clean = _confusion(d.labels, preds_clean, k)

    patched_acc = None
    conf_patched = None
    tdict = None
    if patch is not None:
        transform = transform or TransformConfig()
        rng = rng or Rng(0)
        tdict = transform.to_dict()
        preds_p = np.empty(len(d), dtype=np.int64)
        for start in range(0, len(d), chunk):
            imgs = d.images[start:start + chunk]
            patched = np.stack([
                apply_patch(im, patch,
                            sample_transform(transform, im.shape[:2], patch.side, rng))
                for im in imgs
            ])
            probs = oracle.classify_batch(patched)
            preds_p[start:start + len(probs)] = probs.argmax(axis=1)
        patched_acc = float((preds_p == d.labels).mean())
        conf_patched = _confusion(d.labels, preds_p, k)

    return EvalReport(
        oracle_id=oracle.id, dataset_tag=d.split_tag, n=len(d),
        clean_accuracy=clean_acc, patched_accuracy=patched_acc,
        confusion_clean=conf_clean, confusion_patched=conf_patched,
        transform=tdict, seed=rng.seed if rng is not None else None,
        patch_id=patch_id,
    )


@dataclass
class TransferMatrix:
    """Grid of reports: patches (rows, by source oracle) x oracles (columns).

    A failed cell holds ``{"error": message}`` instead of a report; one bad
    oracle never sinks the rest of the grid.
    """

    trained_on: list
    tested_on: list
    cells: dict  # (trained_on, tested_on) -> EvalReport | {"error": str}

    def to_dict(self) -> dict:
        out = []
        for (row, col), cell in self.cells.items():
            entry = {"trained_on": row, "tested_on": col}
            if isinstance(cell, EvalReport):
                entry["report"] = cell.to_dict()
            else:
                entry["error"] = cell["error"]
            out.append(entry)
        return {"type": "transfer_matrix", "trained_on": self.trained_on,
                "tested_on": self.tested_on, "cells": out}

    @classmethod
    def from_dict(cls, d: dict) -> "TransferMatrix":
        cells = {}
        for entry in d["cells"]:
            key = (entry["trained_on"], entry["tested_on"])
            if "report" in entry:
                cells[key] = EvalReport.from_dict(entry["report"])
            else:
                cells[key] = {"error": entry["error"]}
        return cls(trained_on=list(d["trained_on"]), tested_on=list(d["tested_on"]),
                   cells=cells)


def transfer_matrix(patches: dict, oracles: list, d: LabeledDataset,
                    rng: Rng) -> TransferMatrix:
    """Evaluate every patch against every oracle on one dataset.

    ``patches`` maps a source id to ``(Patch, TransformConfig)`` — each
    patch is evaluated under its own pose policy.  Cell seeds derive from
    the (row, column) pair, so results do not depend on iteration order.
    """
    trained = list(patches.keys())
    tested = [o.id for o in oracles]
    if len(set(tested)) != len(tested):
        raise ValueError(f"oracle ids must be unique, got {tested}")
    cells = {}
    for pid, (patch, tcfg) in patches.items():
        for oracle in oracles:
            cell_rng = rng.spawn(f"cell:{pid}->{oracle.id}")
            try:
                cells[(pid, oracle.id)] = evaluate(
                    oracle, d, patch=patch, transform=tcfg, rng=cell_rng,
                    patch_id=pid,
                )
            except (QuerypatchError, ValueError) as exc:
                cells[(pid, oracle.id)] = {"error": f"{type(exc).__name__}: {exc}"}
    return TransferMatrix(trained_on=trained, tested_on=tested, cells=cells)


def _acc_str(value) -> str:
    return "" if value is None else f"{value:.4f}"


def write_report(report, path, fmt: str = "json") -> None:
    """Serialize an EvalReport or TransferMatrix as JSON or summary CSV.

    The CSV view is one row per (patch, oracle) pair with accuracies to
    four decimal places; errored transfer cells keep their row with the
    accuracy fields left empty.
    """
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, sort_keys=True, indent=2)
            f.write("\n")
        return
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["trained_on", "tested_on", "clean_acc", "patched_acc", "n"])
        if isinstance(report, EvalReport):
            writer.writerow([report.patch_id or "-", report.oracle_id,
                             _acc_str(report.clean_accuracy),
                             _acc_str(report.patched_accuracy), report.n])
            return
        for row in report.trained_on:
            for col in report.tested_on:
                cell = report.cells[(row, col)]
                if isinstance(cell, EvalReport):
                    writer.writerow([row, col, _acc_str(cell.clean_accuracy),
                                     _acc_str(cell.patched_accuracy), cell.n])
                else:
                    writer.writerow([row, col, "", "", ""])


def read_report(path):
    """Load a JSON report back into its dataclass."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("type") == "transfer_matrix":
        return TransferMatrix.from_dict(doc)
    return EvalReport.from_dict(doc)
