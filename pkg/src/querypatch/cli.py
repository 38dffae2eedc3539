"""Command-line front end.

Subcommands::

    train-oracle   fit a built-in classifier on a dataset, save a model file
    attack         optimize a patch against an oracle, save bundle + history
    eval           accuracy / transfer reports for patches against oracles
    apply          composite a saved patch onto one image

Oracles are selected with exactly one of ``--oracle-builtin PATH``
(a saved model file), ``--oracle-cmd "..."`` (a subprocess speaking the
JSON-lines protocol), or ``--oracle-http URL``; the remote kinds also need
``--shape H W C`` and ``--classes K``.

Option values resolve as: command line beats ``--config FILE`` (a flat
JSON object of option names) beats built-in defaults.  The sha256 of the
resolved configuration lands in the run's output for reproducibility.

Exit status: 0 success, 2 for usage/configuration problems, 1 for runtime
failures (oracle died, training diverged, attack aborted).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import shlex
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attack import (AttackConfig, StopRule, config_hash, save_attack_artifacts,
                     train_patch)
from .data import (LabeledDataset, load_idx_dataset, load_image_dir_dataset,
                   read_png, split_dataset, write_png)
from .errors import (AttackAborted, ConfigError, ConsistencyError, FormatError,
                     GeometryError, NumericError, ProtocolError, QuerypatchError,
                     TrainingError, TransportError)
from .evaluation import evaluate, transfer_matrix, write_report
from .geometry import (AffineTransform, TransformConfig, apply_patch,
                       load_patch_bundle, sample_transform)
from .oracle import (BuiltinOracle, HttpOracle, SubprocessOracle, load_model,
                     save_model, train_builtin)
from .rng import Rng
from .zo import ZoHyperParams

_USAGE_ERRORS = (ValueError, ConfigError, ConsistencyError, GeometryError,
                 FormatError, FileNotFoundError, NotADirectoryError)
_RUNTIME_ERRORS = (TransportError, ProtocolError, TrainingError, NumericError,
                   AttackAborted, QuerypatchError, OSError)


class _CliError(Exception):
    """Usage problem detected by the CLI layer itself."""


# ---------------------------------------------------------------------------
# option plumbing
# ---------------------------------------------------------------------------

def _resolve(args, defaults: dict) -> dict:
    """Merge CLI > config file > defaults for the keys in ``defaults``."""
    file_cfg = {}
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as f:
            try:
                file_cfg = json.load(f)
            except json.JSONDecodeError as exc:
                raise _CliError(f"--config {args.config}: not valid JSON: {exc}")
        if not isinstance(file_cfg, dict):
            raise _CliError(f"--config {args.config}: expected a JSON object")
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise _CliError(
                f"--config {args.config}: unknown option(s) {sorted(unknown)}"
            )
    merged = {}
    for key, default in defaults.items():
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            merged[key] = cli_value
        elif key in file_cfg:
            merged[key] = file_cfg[key]
        else:
            merged[key] = default
    return merged


def _merged_hash(merged: dict) -> str:
    return hashlib.sha256(
        json.dumps(merged, sort_keys=True, default=str).encode("utf-8")
    ).hexdigest()


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--config", type=str, default=None,
                   help="JSON file of option defaults")


def _add_data(p: argparse.ArgumentParser):
    g = p.add_argument_group("dataset")
    g.add_argument("--images", type=str, default=None, help="IDX image file")
    g.add_argument("--labels", type=str, default=None, help="IDX label file")
    g.add_argument("--data-root", type=str, default=None,
                   help="directory of images listed in --manifest")
    g.add_argument("--manifest", type=str, default=None,
                   help="tab-separated path/label manifest with a #shape header")
    g.add_argument("--limit", type=int, default=None,
                   help="use only the first N examples (0 = all)")


def _add_oracle(p: argparse.ArgumentParser, repeatable: bool = False):
    g = p.add_argument_group("oracle")
    if repeatable:
        g.add_argument("--oracle-builtin", action="append", default=None,
                       metavar="MODEL", help="saved model file (repeatable)")
    else:
        g.add_argument("--oracle-builtin", type=str, default=None, metavar="MODEL",
                       help="saved model file")
    g.add_argument("--oracle-cmd", type=str, default=None, metavar="CMD",
                   help="subprocess oracle command line")
    g.add_argument("--oracle-http", type=str, default=None, metavar="URL",
                   help="HTTP oracle base URL")
    g.add_argument("--shape", type=int, nargs=3, default=None, metavar=("H", "W", "C"),
                   help="image shape for remote oracles")
    g.add_argument("--classes", type=int, default=None,
                   help="class count for remote oracles")
    g.add_argument("--max-in-flight", type=int, default=None,
                   help="concurrent in-flight requests for remote oracles (default 8)")


def _load_data(m: dict) -> LabeledDataset:
    limit = m.get("limit") or 0
    if m.get("images") or m.get("labels"):
        if not (m.get("images") and m.get("labels")):
            raise _CliError("--images and --labels must be given together")
        if m.get("data_root") or m.get("manifest"):
            raise _CliError("give either IDX files or a manifest, not both")
        return load_idx_dataset(m["images"], m["labels"],
                                limit=limit if limit > 0 else None)
    if m.get("data_root") or m.get("manifest"):
        if not (m.get("data_root") and m.get("manifest")):
            raise _CliError("--data-root and --manifest must be given together")
        d = load_image_dir_dataset(m["data_root"], m["manifest"])
        if limit > 0:
            d = d.subset(np.arange(min(limit, len(d))))
        return d
    raise _CliError("no dataset given: use --images/--labels or --data-root/--manifest")


def _make_oracles(m: dict, repeatable: bool = False):
    """Build the oracle list from the resolved options."""
    builtin = m.get("oracle_builtin")
    if builtin is not None and not isinstance(builtin, list):
        builtin = [builtin]
    cmd, http = m.get("oracle_cmd"), m.get("oracle_http")
    chosen = sum([bool(builtin), cmd is not None, http is not None])
    if chosen == 0:
        raise _CliError(
            "no oracle given: use --oracle-builtin, --oracle-cmd, or --oracle-http")
    if chosen > 1:
        raise _CliError("give exactly one oracle kind")
    max_in_flight = m.get("max_in_flight") or 8
    if builtin:
        if not repeatable and len(builtin) > 1:
            raise _CliError("this command takes a single --oracle-builtin")
        oracles = []
        for path in builtin:
            model = load_model(path)
            oracles.append(BuiltinOracle(model, oracle_id=Path(path).stem,
                                         max_in_flight=max_in_flight))
        return oracles
    if m.get("shape") is None or m.get("classes") is None:
        raise _CliError("remote oracles need --shape and --classes")
    shape, classes = tuple(m["shape"]), int(m["classes"])
    if cmd is not None:
        return [SubprocessOracle(shlex.split(cmd), shape, classes,
                                 max_in_flight=max_in_flight)]
    return [HttpOracle(http, shape, classes, max_in_flight=max_in_flight)]


def _parse_stop(text: str) -> StopRule:
    if text == "budget":
        return StopRule()
    for kind in ("accuracy", "loss"):
        if text.startswith(kind + ":"):
            return StopRule(kind=kind, threshold=float(text[len(kind) + 1:]))
    raise _CliError(f"bad --stop {text!r}: use budget, accuracy:T, or loss:T")


def _parse_location(text):
    if text is None or text == "anywhere":
        return None
    try:
        r, c = (float(v) for v in text.split(","))
    except ValueError:
        raise _CliError(f"bad --location {text!r}: use 'R,C' or 'anywhere'")
    return (r, c)


def _split_for(m: dict, d: LabeledDataset, part: str) -> LabeledDataset:
    """Return the requested part of the train/eval split (or the whole set)."""
    n = m.get("train_split") or 0
    if part == "all" and n == 0:
        return d
    if n <= 0:
        raise _CliError("--use-split needs --train-split N")
    train, eval_part = split_dataset(d, n, Rng(m.get("split_seed") or 0))
    return {"train": train, "eval": eval_part, "all": d}[part]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

_TRAIN_DEFAULTS = {
    "images": None, "labels": None, "data_root": None, "manifest": None,
    "limit": 0, "kind": "linear", "hidden": "", "epochs": 5, "lr": 0.1,
    "batch_size": 32, "seed": 0, "out": None,
}


def _cmd_train_oracle(args) -> int:
    m = _resolve(args, _TRAIN_DEFAULTS)
    if not m["out"]:
        raise _CliError("train-oracle needs --out MODEL_PATH")
    d = _load_data(m)
    hidden = tuple(int(v) for v in str(m["hidden"]).split(",") if v.strip()) \
        if m["hidden"] else ()
    model = train_builtin(d, kind=m["kind"], hidden=hidden, epochs=int(m["epochs"]),
                          lr=float(m["lr"]), batch_size=int(m["batch_size"]),
                          rng=Rng(int(m["seed"])))
    model.metadata["cli_config_sha256"] = _merged_hash(m)
    save_model(model, m["out"])
    acc = model.metadata.get("train_accuracy")
    acc_txt = f"{acc:.4f}" if acc is not None else "n/a"
    print(f"trained {m['kind']} oracle on {len(d)} examples: "
          f"train_accuracy={acc_txt} -> {m['out']}")
    return 0


_ATTACK_DEFAULTS = {
    "images": None, "labels": None, "data_root": None, "manifest": None,
    "limit": 0, "oracle_builtin": None, "oracle_cmd": None, "oracle_http": None,
    "shape": None, "classes": None, "max_in_flight": 8,
    "side": 5, "mode": "untargeted", "target": None, "mask": "square",
    "init": "random", "batch_size": 16, "eot": 4,
    "q": 10, "mu": 0.01, "alpha": 0.05, "beta1": 0.9, "beta2": 0.999,
    "alpha_decay": False, "budget": 10_000,
    "theta_max": 0.0, "scale_min": 1.0, "scale_max": 1.0, "location": None,
    "stop": "budget", "acc_every": 25,
    "train_split": 0, "split_seed": 0, "seed": 0, "out": None,
}


def _cmd_attack(args) -> int:
    m = _resolve(args, _ATTACK_DEFAULTS)
    if not m["out"]:
        raise _CliError("attack needs --out DIRECTORY")
    d = _load_data(m)
    part = "train" if (m["train_split"] or 0) > 0 else "all"
    train = _split_for(m, d, part)
    cfg = AttackConfig(
        patch_side=int(m["side"]),
        channels=train.image_shape[2],
        mode=m["mode"],
        target_class=None if m["target"] is None else int(m["target"]),
        transform=TransformConfig(
            theta_max=float(m["theta_max"]),
            scale_range=(float(m["scale_min"]), float(m["scale_max"])),
            location=_parse_location(m["location"]),
        ),
        mask_kind=m["mask"],
        init=m["init"],
        batch_size=int(m["batch_size"]),
        eot_samples=int(m["eot"]),
        hyper=ZoHyperParams(beta1=float(m["beta1"]), beta2=float(m["beta2"]),
                            mu=float(m["mu"]), alpha=float(m["alpha"]),
                            q=int(m["q"]), alpha_decay=bool(m["alpha_decay"])),
        budget=int(m["budget"]),
        stop=_parse_stop(m["stop"]),
        accuracy_check_every=int(m["acc_every"]),
        seed=int(m["seed"]),
    )
    oracle = _make_oracles(m)[0]
    try:
        result = train_patch(train, oracle, cfg)
    finally:
        oracle.close()
    save_attack_artifacts(m["out"], result, cfg)
    acc = result.final_train_accuracy
    acc_txt = f"{acc:.4f}" if acc is not None else "n/a"
    print(f"attack finished: steps={len(result.history)} "
          f"queries={result.queries_used} final_train_accuracy={acc_txt} "
          f"stop={result.stop_reason} config_sha256={config_hash(cfg)[:12]} "
          f"-> {m['out']}")
    return 0


_EVAL_DEFAULTS = {
    "images": None, "labels": None, "data_root": None, "manifest": None,
    "limit": 0, "oracle_builtin": None, "oracle_cmd": None, "oracle_http": None,
    "shape": None, "classes": None, "max_in_flight": 8,
    "patch": None, "transfer": False, "use_split": "all",
    "train_split": 0, "split_seed": 0, "seed": 0,
    "out": None, "format": "json",
}


def _load_bundles(paths):
    """Bundle dirs -> ordered {source id: (patch, pose policy)}."""
    out = {}
    for path in paths:
        patch, meta = load_patch_bundle(path)
        tcfg = TransformConfig.from_dict(meta["transform"]) \
            if meta.get("transform") else TransformConfig()
        pid = meta.get("provenance", {}).get("oracle_id") or Path(path).name
        if pid in out:
            pid = f"{pid}:{Path(path).name}"
        out[pid] = (patch, tcfg)
    return out


def _cmd_eval(args) -> int:
    m = _resolve(args, _EVAL_DEFAULTS)
    if m["format"] not in ("json", "csv"):
        raise _CliError(f"bad --format {m['format']!r}: use json or csv")
    if m["use_split"] not in ("train", "eval", "all"):
        raise _CliError(f"bad --use-split {m['use_split']!r}")
    d = _split_for(m, _load_data(m), m["use_split"])
    patches = m["patch"] or []
    if not isinstance(patches, list):
        patches = [patches]
    oracles = _make_oracles(m, repeatable=True)
    rng = Rng(int(m["seed"]))
    try:
        if m["transfer"]:
            if not patches:
                raise _CliError("--transfer needs at least one --patch")
            report = transfer_matrix(_load_bundles(patches), oracles, d, rng)
            for (row, col), cell in report.cells.items():
                if isinstance(cell, dict):
                    print(f"{row} -> {col}: ERROR {cell['error']}")
                else:
                    print(f"{row} -> {col}: clean={cell.clean_accuracy:.4f} "
                          f"patched={cell.patched_accuracy:.4f} (n={cell.n})")
        else:
            if len(oracles) != 1:
                raise _CliError("plain eval takes a single oracle; use --transfer")
            if len(patches) > 1:
                raise _CliError("plain eval takes at most one --patch")
            if patches:
                bundles = _load_bundles(patches)
                pid, (patch, tcfg) = next(iter(bundles.items()))
                report = evaluate(oracles[0], d, patch=patch, transform=tcfg,
                                  rng=rng.spawn("eval"), patch_id=pid)
                print(f"{report.oracle_id}: clean={report.clean_accuracy:.4f} "
                      f"patched={report.patched_accuracy:.4f} (n={report.n})")
            else:
                report = evaluate(oracles[0], d)
                print(f"{report.oracle_id}: clean={report.clean_accuracy:.4f} "
                      f"(n={report.n})")
    finally:
        for o in oracles:
            o.close()
    if m["out"]:
        write_report(report, m["out"], fmt=m["format"])
        print(f"report ({m['format']}) -> {m['out']}")
    return 0


_APPLY_DEFAULTS = {
    "patch": None, "image": None, "out": None, "pose": None, "seed": 0,
}


def _cmd_apply(args) -> int:
    m = _resolve(args, _APPLY_DEFAULTS)
    for key in ("patch", "image", "out"):
        if not m[key]:
            raise _CliError(f"apply needs --{key}")
    patch, meta = load_patch_bundle(m["patch"])
    image = read_png(m["image"], channels=patch.channels)
    if m["pose"] is not None:
        try:
            r, c, theta, scale = (float(v) for v in str(m["pose"]).split(","))
        except ValueError:
            raise _CliError(f"bad --pose {m['pose']!r}: use 'R,C,THETA,SCALE'")
        t = AffineTransform(rotation=theta, scale=scale, loc=(r, c))
    else:
        tcfg = TransformConfig.from_dict(meta["transform"]) \
            if meta.get("transform") else TransformConfig()
        t = sample_transform(tcfg, image.shape[:2], patch.side,
                             Rng(int(m["seed"])).spawn("apply"))
    write_png(m["out"], apply_patch(image, patch, t))
    print(f"applied patch at rotation={t.rotation:.4f} scale={t.scale:.4f} "
          f"loc=({t.loc[0]:.2f},{t.loc[1]:.2f}) -> {m['out']}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="querypatch",
        description="query-only adversarial patches for image classifiers",
    )
    ap.add_argument("--version", action="version", version=f"querypatch {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-oracle", help="fit a built-in classifier")
    _add_common(p)
    _add_data(p)
    p.add_argument("--kind", choices=["linear", "mlp"], default=None)
    p.add_argument("--hidden", type=str, default=None,
                   help="comma-separated hidden sizes for mlp, e.g. 64,32")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--out", type=str, default=None, help="model file to write")
    p.set_defaults(fn=_cmd_train_oracle)

    p = sub.add_parser("attack", help="optimize a patch against an oracle")
    _add_common(p)
    _add_data(p)
    _add_oracle(p)
    p.add_argument("--side", type=int, default=None, help="patch side in pixels")
    p.add_argument("--mode", choices=["untargeted", "targeted"], default=None)
    p.add_argument("--target", type=int, default=None, help="target class")
    p.add_argument("--mask", choices=["square", "circle"], default=None)
    p.add_argument("--init", type=str, default=None,
                   help="'random', 'gray', or a bundle directory")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--eot", type=int, default=None, help="pose draws per image")
    p.add_argument("--q", type=int, default=None, help="probe directions per step")
    p.add_argument("--mu", type=float, default=None, help="probe radius")
    p.add_argument("--alpha", type=float, default=None, help="step size")
    p.add_argument("--beta1", type=float, default=None)
    p.add_argument("--beta2", type=float, default=None)
    p.add_argument("--alpha-decay", action="store_true", default=None)
    p.add_argument("--budget", type=int, default=None, help="oracle query budget")
    p.add_argument("--theta-max", type=float, default=None, help="max |rotation|")
    p.add_argument("--scale-min", type=float, default=None)
    p.add_argument("--scale-max", type=float, default=None)
    p.add_argument("--location", type=str, default=None,
                   help="'R,C' to pin the patch center, or 'anywhere'")
    p.add_argument("--stop", type=str, default=None,
                   help="budget | accuracy:T | loss:T")
    p.add_argument("--acc-every", type=int, default=None,
                   help="steps between accuracy-stop checks")
    p.add_argument("--train-split", type=int, default=None,
                   help="attack the first part of a seeded N/rest split")
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--out", type=str, default=None, help="output directory")
    p.set_defaults(fn=_cmd_attack)

    p = sub.add_parser("eval", help="accuracy / transfer reports")
    _add_common(p)
    _add_data(p)
    _add_oracle(p, repeatable=True)
    p.add_argument("--patch", action="append", default=None, metavar="BUNDLE",
                   help="patch bundle directory (repeatable with --transfer)")
    p.add_argument("--transfer", action="store_true", default=None,
                   help="cross-evaluate every patch against every oracle")
    p.add_argument("--use-split", choices=["train", "eval", "all"], default=None)
    p.add_argument("--train-split", type=int, default=None)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--out", type=str, default=None, help="report file to write")
    p.add_argument("--format", choices=["json", "csv"], default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("apply", help="composite a patch onto an image")
    _add_common(p)
    p.add_argument("--patch", type=str, default=None, help="bundle directory")
    p.add_argument("--image", type=str, default=None, help="input PNG")
    p.add_argument("--out", type=str, default=None, help="output PNG")
    p.add_argument("--pose", type=str, default=None,
                   help="'R,C,THETA,SCALE'; default samples from the bundle policy")
    p.set_defaults(fn=_cmd_apply)
    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _RUNTIME_ERRORS as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
