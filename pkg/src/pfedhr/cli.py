"""pfedhr command line: simulate, ablate, dump-candidates.

Every run writes ``manifest.json`` to its output directory; passing that file
back through ``--config`` repeats the run exactly.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import LabeledDataset, cross_public, load_idx, make_synthetic
from .errors import ConfigInvalid, PFedHRError
from .orchestrator import FedConfig, Mode, run_experiment, setup, run_round, write_reports, write_summary

log = logging.getLogger("pfedhr")

# Desk-scale synthetic defaults (4-class blobs in vector mode).
SYNTHETIC_DEFAULTS = {"kind": "synthetic", "num_classes": 4, "n": 4800, "dim": 64, "scale": 1.0, "seed": 0}

ABLATION_AXES = {
    "clusters": int,
    "stitch_depth": int,
    "finetune_epochs": int,
    "public_fraction": float,
}

_FLAG_FIELDS = {
    "mode": "mode",
    "labeled_public": "labeled_public",
    "clients": "num_clients",
    "active": "active_per_round",
    "rounds": "rounds",
    "clusters": "clusters",
    "kd_lambda": "kd_lambda",
    "stitch_depth": "stitch_depth",
    "finetune_epochs": "finetune_epochs",
    "public_fraction": "public_fraction",
    "seed": "seed",
}


def _bool(text: str) -> bool:
    low = str(text).lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def parse_dataset(text: str | dict | None) -> dict:
    """``synthetic`` or ``idx:<images>,<labels>`` (or an already-parsed dict)."""
    if text is None:
        return dict(SYNTHETIC_DEFAULTS)
    if isinstance(text, dict):
        out = dict(SYNTHETIC_DEFAULTS) if text.get("kind", "synthetic") == "synthetic" else {}
        out.update(text)
        return out
    if text == "synthetic":
        return dict(SYNTHETIC_DEFAULTS)
    if text.startswith("idx:"):
        paths = text[4:].split(",")
        if len(paths) != 2:
            raise ConfigInvalid("dataset", "idx needs <images>,<labels>")
        return {"kind": "idx", "images": paths[0], "labels": paths[1]}
    raise ConfigInvalid("dataset", f"unknown dataset {text!r}")


def parse_public(text: str | dict | None) -> dict:
    """``same`` or ``cross:<dataset>``."""
    if text is None or text == "same":
        return {"kind": "same"}
    if isinstance(text, dict):
        return text
    if text.startswith("cross:"):
        return {"kind": "cross", "source": parse_dataset(text[6:])}
    raise ConfigInvalid("public", f"unknown public source {text!r}")


def load_dataset(desc: dict, num_classes: int | None = None) -> LabeledDataset:
    if desc["kind"] == "synthetic":
        return make_synthetic(desc["num_classes"], desc["n"], desc["dim"], desc["seed"], desc["scale"])
    if desc["kind"] == "idx":
        return load_idx(desc["images"], desc["labels"], num_classes=num_classes or desc.get("num_classes"))
    raise ConfigInvalid("dataset", f"unknown dataset kind {desc['kind']!r}")


def load_public(desc: dict, dataset: LabeledDataset, config: FedConfig) -> LabeledDataset | None:
    """None for the default carved-out split; otherwise the resized cross source,
    subsampled to public_fraction of its size."""
    if desc["kind"] == "same":
        return None
    source = load_dataset(desc["source"])
    public = cross_public(source, dataset.input_spec, dataset.num_classes)
    size = max(2, int(round(config.public_fraction * len(public))))
    idx = np.random.default_rng(config.seed).permutation(len(public))[:size]
    return public.subset(np.sort(idx))


def _field_names() -> set[str]:
    return {f.name for f in dataclasses.fields(FedConfig)}


def parse_config(path=None, overrides: dict | None = None) -> tuple[FedConfig, dict, dict]:
    """Config file (flat JSON or a saved manifest) with flag overrides on top.

    Returns the validated config plus dataset and public descriptors.
    """
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid("config", f"cannot read {path}: {exc}") from exc
        if "config" in raw:  # manifest
            raw = {**raw["config"], "dataset": raw.get("dataset"), "public": raw.get("public")}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    dataset = parse_dataset(overrides.pop("dataset", raw.pop("dataset", None)))
    public = parse_public(overrides.pop("public", raw.pop("public", None)))
    fields = {**raw, **overrides}
    unknown = set(fields) - _field_names()
    if unknown:
        raise ConfigInvalid(sorted(unknown)[0], "unknown config key")
    try:
        config = FedConfig(**fields)
    except (ValueError, TypeError) as exc:
        raise ConfigInvalid("config", str(exc)) from exc
    return config.validate(), dataset, public


def manifest(config: FedConfig, dataset: dict, public: dict, out_dir) -> dict:
    return {
        "version": __version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "dataset": dataset,
        "public": public,
        "out": str(out_dir),
    }


def _prepare(args):
    overrides = {flag: getattr(args, flag, None) for flag in _FLAG_FIELDS}
    overrides = {_FLAG_FIELDS[k]: v for k, v in overrides.items()}
    overrides["dataset"] = args.dataset
    overrides["public"] = args.public
    config, ds_desc, pub_desc = parse_config(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest(config, ds_desc, pub_desc, out), indent=2) + "\n")
    dataset = load_dataset(ds_desc)
    public = load_public(pub_desc, dataset, config)
    return config, dataset, public, out


def _reset(out: Path, *names):
    for name in names:
        (out / name).unlink(missing_ok=True)


def _write_candidates(reports, path: Path) -> None:
    with open(path, "w") as fh:
        for r in reports:
            for i, dump in enumerate(r.candidate_dumps):
                fh.write(f"# round {r.round} candidate {i}\n{dump}\n")


def cmd_simulate(args) -> int:
    config, dataset, public, out = _prepare(args)
    _reset(out, "rounds.jsonl", "summary.csv")
    reports = run_experiment(config, dataset, public)
    write_reports(reports, out)
    _write_candidates(reports, out / "candidates.txt")
    for r in reports:
        print(f"round {r.round:3d}  mean_acc {r.mean_acc:.4f}  std {r.std_acc:.4f}  M {r.num_candidates}", flush=True)
    return 0


def cmd_ablate(args) -> int:
    config, dataset, public, out = _prepare(args)
    cast = ABLATION_AXES[args.axis]
    values = [cast(v) for v in args.values.split(",")]
    _reset(out, "rounds.jsonl", "summary.csv")
    for value in values:
        cfg = dataclasses.replace(config, **{args.axis: value}).validate()
        reports = run_experiment(cfg, dataset, public)
        with open(out / "rounds.jsonl", "a") as fh:
            for r in reports:
                fh.write(json.dumps({"axis": args.axis, "value": value, **r.to_json()}) + "\n")
        if reports:
            write_summary(reports[-1:], out / "summary.csv", {"axis": args.axis, "value": value})
            print(f"{args.axis}={value}  mean_acc {reports[-1].mean_acc:.4f}  M {reports[-1].num_candidates}", flush=True)
    return 0


def cmd_dump_candidates(args) -> int:
    config, dataset, public, out = _prepare(args)
    config = dataclasses.replace(config, mode=Mode.PFEDHR)
    fed = setup(config, dataset, public)
    report = run_round(fed, 0)
    _write_candidates([report], out / "candidates.txt")
    sys.stdout.write((out / "candidates.txt").read_text())
    if not report.candidate_dumps:
        print("# no candidates (all clients fall back to SELF)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfedhr", description="Heterogeneous model reassembly federated simulator")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config or a saved manifest.json")
    common.add_argument("--mode", choices=[m.value for m in Mode])
    common.add_argument("--dataset", help="synthetic | idx:<images>,<labels>")
    common.add_argument("--public", help="same | cross:<dataset>")
    common.add_argument("--labeled-public", type=_bool, dest="labeled_public")
    common.add_argument("--clients", type=int)
    common.add_argument("--active", type=int)
    common.add_argument("--rounds", type=int)
    common.add_argument("--clusters", type=int)
    common.add_argument("--kd-lambda", type=float, dest="kd_lambda")
    common.add_argument("--stitch-depth", type=int, dest="stitch_depth")
    common.add_argument("--finetune-epochs", type=int, dest="finetune_epochs")
    common.add_argument("--public-fraction", type=float, dest="public_fraction")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="runs/latest")
    sub = parser.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", parents=[common], help="run a full experiment")
    sim.set_defaults(func=cmd_simulate)
    abl = sub.add_parser("ablate", parents=[common], help="sweep one axis, one summary row per value")
    abl.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    abl.add_argument("--values", required=True, help="comma separated, e.g. 2,3,4,5")
    abl.set_defaults(func=cmd_ablate)
    dump = sub.add_parser("dump-candidates", parents=[common], help="one server update, print candidate structures")
    dump.set_defaults(func=cmd_dump_candidates)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except PFedHRError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
