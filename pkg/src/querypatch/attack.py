"""Query-only patch optimization against a classification oracle.

The patch is the optimizer's parameter vector.  Each step draws a fresh
image minibatch and a fresh seed for pose sampling; within the step every
probe of the objective reuses both, so the q+1 evaluations of one gradient
estimate see the same smoothed objective.  The loss averages over pose
draws (one independent pose per image per draw): untargeted runs minimize
the mean log-probability of the true class, targeted runs minimize the
mean negative log-probability of the target class.

Budget accounting is in oracle image queries.  When the budget is large
enough, one dataset pass is held back so the final patched accuracy can be
measured; stop rules never push the total past the budget.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .errors import AttackAborted, ConsistencyError, ProtocolError, TransportError
from .geometry import (Patch, TransformConfig, load_patch_bundle, make_mask,
                       sample_transform, apply_patch, save_patch_bundle)
from .oracle import Oracle
from .rng import Rng, derive_seed
from .zo import (BoxConstraint, HistoryRow, ZoHyperParams, run_zo_adamm,
                 write_history_csv)

_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class StopRule:
    """When to stop early: never ('budget'), patched accuracy at or below a
    threshold ('accuracy'), or minibatch objective at or below one ('loss')."""

    kind: str = "budget"
    threshold: float | None = None

    def __post_init__(self):
        if self.kind not in ("budget", "accuracy", "loss"):
            raise ValueError(f"unknown stop rule {self.kind!r}")
        if self.kind == "budget":
            if self.threshold is not None:
                raise ValueError("stop rule 'budget' takes no threshold")
        elif self.threshold is None:
            raise ValueError(f"stop rule {self.kind!r} needs a threshold")
        elif self.kind == "accuracy" and not (0.0 <= self.threshold <= 1.0):
            raise ValueError(f"accuracy threshold must lie in [0,1], got {self.threshold}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "StopRule":
        return cls(kind=d.get("kind", "budget"), threshold=d.get("threshold"))


@dataclass
class AttackConfig:
    patch_side: int
    channels: int
    mode: str = "untargeted"
    target_class: int | None = None
    transform: TransformConfig = field(default_factory=TransformConfig)
    mask_kind: str = "square"
    init: str = "random"  # "random" | "gray" | path to a patch bundle
    batch_size: int = 16
    eot_samples: int = 4
    hyper: ZoHyperParams = field(default_factory=ZoHyperParams)
    budget: int = 10_000
    stop: StopRule = field(default_factory=StopRule)
    accuracy_check_every: int = 25  # steps between accuracy-stop probes
    seed: int = 0

    def __post_init__(self):
        if self.patch_side < 1:
            raise ValueError(f"patch_side must be >= 1, got {self.patch_side}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.mode not in ("untargeted", "targeted"):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.mode == "targeted" and self.target_class is None:
            raise ValueError("targeted mode needs a target_class")
        if self.mode == "untargeted" and self.target_class is not None:
            raise ValueError("untargeted mode must not set target_class")
        if self.target_class is not None and self.target_class < 0:
            raise ValueError(f"target_class must be >= 0, got {self.target_class}")
        if self.batch_size < 1 or self.eot_samples < 1:
            raise ValueError("batch_size and eot_samples must be >= 1")
        if self.budget < 1:
            raise ValueError(f"budget must be positive, got {self.budget}")
        if self.accuracy_check_every < 1:
            raise ValueError("accuracy_check_every must be >= 1")

    def to_dict(self) -> dict:
        return {
            "patch_side": self.patch_side,
            "channels": self.channels,
            "mode": self.mode,
            "target_class": self.target_class,
            "transform": self.transform.to_dict(),
            "mask_kind": self.mask_kind,
            "init": self.init,
            "batch_size": self.batch_size,
            "eot_samples": self.eot_samples,
            "hyper": self.hyper.to_dict(),
            "budget": self.budget,
            "stop": self.stop.to_dict(),
            "accuracy_check_every": self.accuracy_check_every,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        d["transform"] = TransformConfig.from_dict(d.get("transform", {}))
        d["hyper"] = ZoHyperParams.from_dict(d.get("hyper", {}))
        d["stop"] = StopRule.from_dict(d.get("stop", {}))
        return cls(**d)


def config_hash(cfg: AttackConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class AttackResult:
    patch: Patch
    history: list[HistoryRow]
    queries_used: int
    final_train_accuracy: float | None  # None when no budget was left for it
    stop_reason: str  # "budget" | "loss" | "accuracy"
    provenance: dict


def init_patch(side: int, channels: int, init: str, rng: Rng,
               mask_kind: str = "square") -> Patch:
    """Starting patch: mid-gray, uniform random, or loaded from a bundle."""
    mask = make_mask(side, mask_kind)
    if init == "gray":
        return Patch(pixels=np.full((side, side, channels), 0.5), mask=mask)
    if init == "random":
        return Patch(pixels=rng.gen.uniform(size=(side, side, channels)), mask=mask)
    patch, _ = load_patch_bundle(init)
    if patch.side != side or patch.channels != channels:
        raise ConsistencyError(
            f"bundle {init!r} holds a {patch.side}x{patch.side}x{patch.channels} "
            f"patch, config wants {side}x{side}x{channels}"
        )
    return patch


def eot_loss(pixel_vec: np.ndarray, batch, oracle: Oracle, cfg: AttackConfig,
             rng: Rng) -> float:
    """Pose-averaged loss of a flat pixel vector on one minibatch.

    Poses are drawn draw-major: each of the ``eot_samples`` draws walks the
    whole batch once, so the n-draw loss is exactly the mean of n one-draw
    losses evaluated on the same rng stream.  Pixels are clamped to [0,1]
    before rendering so off-box probe points remain valid images.
    """
    images, labels = batch
    images = np.asarray(images)
    b = len(images)
    if b == 0:
        raise ValueError("loss needs a non-empty batch")
    pixels = np.clip(
        np.asarray(pixel_vec, dtype=np.float64).reshape(
            cfg.patch_side, cfg.patch_side, cfg.channels),
        0.0, 1.0,
    )
    patch = Patch(pixels=pixels, mask=make_mask(cfg.patch_side, cfg.mask_kind))
    patched = np.empty((cfg.eot_samples * b,) + images.shape[1:], dtype=np.float64)
    k = 0
    for _ in range(cfg.eot_samples):
        for i in range(b):
            t = sample_transform(cfg.transform, images.shape[1:3], cfg.patch_side, rng)
            patched[k] = apply_patch(images[i], patch, t)
            k += 1
    probs = oracle.classify_batch(patched)
    if cfg.mode == "targeted":
        p = probs[:, cfg.target_class]
        return float(-np.log(np.clip(p, _PROB_FLOOR, None)).mean())
    p_true = probs[np.arange(len(probs)), np.tile(np.asarray(labels), cfg.eot_samples)]
    return float(np.log(np.clip(p_true, _PROB_FLOOR, None)).mean())


def patched_accuracy(oracle: Oracle, d: LabeledDataset, patch: Patch,
                     transform: TransformConfig, rng: Rng, chunk: int = 512) -> float:
    """Accuracy on the dataset with one sampled pose per image."""
    if len(d) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(d), chunk):
        imgs = d.images[start:start + chunk]
        labels = d.labels[start:start + chunk]
        patched = np.stack([
            apply_patch(im, patch,
                        sample_transform(transform, im.shape[:2], patch.side, rng))
            for im in imgs
        ])
        preds = oracle.classify_batch(patched).argmax(axis=1)
        correct += int((preds == labels).sum())
    return correct / len(d)


def train_patch(train: LabeledDataset, oracle: Oracle, cfg: AttackConfig) -> AttackResult:
    """Optimize a patch against the oracle within the query budget.

    Deterministic given (dataset, oracle, config): every random draw comes
    from substreams of ``cfg.seed``.  Oracle or protocol failures raise
    AttackAborted carrying the history of completed steps.
    """
    if len(train) == 0:
        raise ValueError("cannot attack with an empty training split")
    if train.image_shape != oracle.input_shape:
        raise ConsistencyError(
            f"dataset images are {train.image_shape}, oracle expects {oracle.input_shape}"
        )
    if cfg.channels != train.image_shape[2]:
        raise ValueError(
            f"config channels {cfg.channels} != dataset channels {train.image_shape[2]}"
        )
    if cfg.target_class is not None and cfg.target_class >= oracle.num_classes:
        raise ValueError(
            f"target_class {cfg.target_class} out of range for "
            f"{oracle.num_classes}-class oracle"
        )
    # Surfaces impossible patch/image geometry before any queries are spent.
    sample_transform(cfg.transform, train.image_shape[:2], cfg.patch_side,
                     Rng(cfg.seed).spawn("geometry-check"))

    master = Rng(cfg.seed)
    patch0 = init_patch(cfg.patch_side, cfg.channels, cfg.init,
                        master.spawn("init"), cfg.mask_kind)
    n_train = len(train)
    per_eval = min(cfg.batch_size, n_train) * cfg.eot_samples
    step_cost = (cfg.hyper.q + 1) * per_eval
    if cfg.budget >= step_cost + n_train:
        reserve = n_train  # hold back one dataset pass for the final accuracy
    else:
        reserve = 0

    start_count = oracle.query_count

    def used() -> int:
        return oracle.query_count - start_count

    holder: dict = {}

    def on_step_start(state):
        label = f"step-{state.t + 1}"
        srng = master.spawn(label)
        idx = srng.gen.choice(n_train, size=min(cfg.batch_size, n_train), replace=False)
        holder["batch"] = (train.images[idx], train.labels[idx])
        # Every probe in this step replays the same pose stream.
        holder["pose_seed"] = derive_seed(master.seed, label + ":poses")

    def objective(p):
        return eot_loss(p, holder["batch"], oracle, cfg, Rng(holder["pose_seed"]))

    rows: list[HistoryRow] = []
    stop_reason = ["budget"]

    def current_patch(params) -> Patch:
        pixels = np.clip(params.reshape(cfg.patch_side, cfg.patch_side, cfg.channels),
                         0.0, 1.0)
        return Patch(pixels=pixels, mask=patch0.mask)

    def on_step(state, row):
        rows.append(row)
        if cfg.stop.kind == "loss" and row.objective <= cfg.stop.threshold:
            stop_reason[0] = "loss"
            return True
        if (cfg.stop.kind == "accuracy"
                and state.t % cfg.accuracy_check_every == 0
                and cfg.budget - used() - reserve >= n_train):
            acc = patched_accuracy(oracle, train, current_patch(state.params),
                                   cfg.transform, master.spawn(f"acc-check-{state.t}"))
            if acc <= cfg.stop.threshold:
                stop_reason[0] = "accuracy"
                return True
        if cfg.budget - used() - reserve < step_cost:
            return True
        return False

    p0 = patch0.pixels.ravel()
    if cfg.budget - reserve >= step_cost:
        try:
            state, _ = run_zo_adamm(
                objective, p0, cfg.hyper, BoxConstraint(0.0, 1.0),
                budget=cfg.budget // per_eval, rng=master.spawn("directions"),
                on_step_start=on_step_start, on_step=on_step,
            )
        except (TransportError, ProtocolError) as exc:
            raise AttackAborted(
                f"oracle failed after {len(rows)} steps: {exc}",
                history=rows, queries_used=used(),
            ) from exc
        final_params = state.params
        steps = state.t
    else:
        final_params = p0  # budget allows zero steps; return the start patch
        steps = 0

    patch = current_patch(final_params)
    final_acc = None
    if cfg.budget - used() >= n_train:
        final_acc = patched_accuracy(oracle, train, patch, cfg.transform,
                                     master.spawn("final-accuracy"))
    provenance = {
        "oracle_id": oracle.id,
        "seed": cfg.seed,
        "config_sha256": config_hash(cfg),
        "steps": steps,
        "queries_used": used(),
        "mode": cfg.mode,
        "stop_reason": stop_reason[0],
    }
    return AttackResult(
        patch=patch, history=rows, queries_used=used(),
        final_train_accuracy=final_acc, stop_reason=stop_reason[0],
        provenance=provenance,
    )


def save_attack_artifacts(directory, result: AttackResult, cfg: AttackConfig) -> None:
    """Patch bundle + history.csv + attack.json under one directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_patch_bundle(directory, result.patch, transform_config=cfg.transform,
                      provenance=result.provenance)
    write_history_csv(result.history, directory / "history.csv")
    doc = {
        "config": cfg.to_dict(),
        "config_sha256": config_hash(cfg),
        "steps": len(result.history),
        "queries_used": result.queries_used,
        "final_train_accuracy": result.final_train_accuracy,
        "stop_reason": result.stop_reason,
        "oracle_id": result.provenance.get("oracle_id"),
    }
    with open(directory / "attack.json", "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")
