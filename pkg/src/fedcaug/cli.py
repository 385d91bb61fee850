"""Command-line front door: ``fedcaug run`` and ``fedcaug export``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np

from . import __version__, crl, dataset, evaluation, fedsim, image_ops, tensor_nn

log = logging.getLogger("fedcaug")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

# tags for deriving per-purpose data seeds from an experiment seed
TRAIN_TAG, ID_TEST_TAG, OOD_TEST_TAG, PARTITION_TAG = 1, 2, 3, 4

_POS_INT = {"type": "integer", "minimum": 1}
_UNIT = {"type": "number", "minimum": 0, "maximum": 1}

_SPURIOUS = {
    "num_classes": {"type": "integer", "minimum": 1, "maximum": 10},
    "num_backgrounds": {"type": "integer", "minimum": 2, "maximum": len(dataset.PALETTE)},
    "train_correlation": _UNIT,
    "ood_policy": {"enum": list(dataset.OOD_POLICIES)},
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "seeds"],
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "synthetic": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        **_SPURIOUS,
                        "n_per_class": _POS_INT,
                        "test_per_class": _POS_INT,
                    },
                },
                "idx": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["train_images", "train_labels", "test_images", "test_labels"],
                    "properties": {
                        **_SPURIOUS,
                        "train_images": {"type": "string"},
                        "train_labels": {"type": "string"},
                        "test_images": {"type": "string"},
                        "test_labels": {"type": "string"},
                        "limit": _POS_INT,
                    },
                },
                "dirichlet_beta": {"type": "number", "exclusiveMinimum": 0},
            },
            "oneOf": [{"required": ["synthetic"]}, {"required": ["idx"]}],
        },
        "federated": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "num_clients": {"type": "integer", "minimum": 2},
                "rounds": {"type": "integer", "minimum": 0},
                "local_epochs": _POS_INT,
                "batch_size": _POS_INT,
                "lr": {"type": "number", "minimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "sample_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "alpha": _UNIT,
                "lambda_weighted": _UNIT,
                "align_weight": {"type": "number", "minimum": 0},
                "resample_per_epoch": {"type": "boolean"},
                "threads": _POS_INT,
            },
        },
        "crl": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "backend": {"enum": list(crl.BACKENDS)},
                "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "avg_window": {"type": "integer", "minimum": 3},
                "canny_low": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "canny_high": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "canny_sigma": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "arms": {"type": "array", "minItems": 1, "uniqueItems": True, "items": {"enum": list(fedsim.ARMS)}},
        "seeds": {"type": "array", "minItems": 1, "uniqueItems": True, "items": {"type": "integer", "minimum": 0}},
        "output_dir": {"type": "string"},
        "wall_clock": {"type": "boolean"},
    },
}


class ConfigError(ValueError):
    """Invalid configuration; ``where`` is a line:column or a field path."""

    def __init__(self, where: str, message: str):
        self.where = where
        super().__init__(f"{where}: {message}")


@dataclass
class ExperimentConfig:
    spurious: dataset.SpuriousSpec
    federated: fedsim.FederatedConfig
    crl: crl.CRLConfig
    seeds: List[int]
    arms: List[str]
    output_dir: Path
    dirichlet_beta: float = 0.5
    n_per_class: int = 50
    test_per_class: int = 50
    idx: Optional[Dict] = None
    wall_clock: bool = False
    raw: Dict = field(default_factory=dict)


def _field_path(err: jsonschema.ValidationError) -> str:
    path = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
    return "$" + path


def _line_of(text: str, err: jsonschema.ValidationError) -> Optional[int]:
    # best effort: the line of the innermost named key
    keys = [p for p in err.absolute_path if isinstance(p, str)]
    if not keys:
        return None
    needle = f'"{keys[-1]}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def parse_config(text: str, base_dir: Path = Path(".")) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}", exc.msg) from None
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        line = _line_of(text, err)
        where = _field_path(err) + (f" (line {line})" if line else "")
        raise ConfigError(where, err.message)

    ds = raw["dataset"]
    src = ds.get("synthetic") if "synthetic" in ds else ds["idx"]
    spec_kw = {k: src[k] for k in _SPURIOUS if k in src}
    fed_kw = dict(raw.get("federated", {}))
    crl_kw = dict(raw.get("crl", {}))
    try:
        spurious = dataset.SpuriousSpec(**spec_kw)
        backend = crl.SaliencyBackend(
            kind=crl_kw.pop("backend", "threshold"),
            **{k: crl_kw.pop(k) for k in ("level", "avg_window") if k in crl_kw},
        )
        fed = fedsim.FederatedConfig(**fed_kw)
        crl_cfg = crl.CRLConfig(lambda_weighted=fed.lambda_weighted, backend=backend, **crl_kw)
        if not crl_cfg.canny_low < crl_cfg.canny_high:
            raise ValueError("canny_low must be below canny_high")
    except (TypeError, ValueError) as exc:
        raise ConfigError("$", str(exc)) from None

    idx = None
    if "idx" in ds:
        idx = {k: (str((base_dir / v).resolve()) if k.endswith(("images", "labels")) else v)
               for k, v in ds["idx"].items()}
    synth = ds.get("synthetic", {})
    return ExperimentConfig(
        spurious=spurious,
        federated=fed,
        crl=crl_cfg,
        seeds=list(raw["seeds"]),
        arms=list(raw.get("arms", fedsim.ARMS)),
        output_dir=Path(raw.get("output_dir", "runs")),
        dirichlet_beta=float(ds.get("dirichlet_beta", 0.5)),
        n_per_class=int(synth.get("n_per_class", 50)),
        test_per_class=int(synth.get("test_per_class", 50)),
        idx=idx,
        wall_clock=bool(raw.get("wall_clock", False)),
        raw=raw,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
    return parse_config(text, path.parent)


# -- data ----------------------------------------------------------------------

@dataclass
class SeedData:
    train: List[dataset.LabeledImage]
    id_test: List[dataset.LabeledImage]
    ood_test: List[dataset.LabeledImage]
    shards: List[dataset.ClientShard]


def load_data(cfg: ExperimentConfig, seed: int) -> Tuple[list, list, list]:
    spec = cfg.spurious
    if cfg.idx is None:
        train = dataset.synth_colored_digits(spec, cfg.n_per_class, dataset.derive_seed(seed, TRAIN_TAG))
        id_test = dataset.synth_colored_digits(spec, cfg.test_per_class, dataset.derive_seed(seed, ID_TEST_TAG))
        ood = dataset.make_ood_test_split(spec, cfg.test_per_class, dataset.derive_seed(seed, OOD_TEST_TAG))
        return train, id_test, ood
    limit = cfg.idx.get("limit")
    train_gray = dataset.load_idx(cfg.idx["train_images"], cfg.idx["train_labels"])[:limit]
    test_gray = dataset.load_idx(cfg.idx["test_images"], cfg.idx["test_labels"])[:limit]
    train = dataset.colorize(train_gray, spec, dataset.derive_seed(seed, TRAIN_TAG), prefix="train")
    id_test = dataset.colorize(test_gray, spec, dataset.derive_seed(seed, ID_TEST_TAG), prefix="id")
    ood = dataset.colorize(test_gray, spec, dataset.derive_seed(seed, OOD_TEST_TAG), correlation=0.0, prefix="ood")
    return train, id_test, ood


def prepare(cfg: ExperimentConfig, seed: int, with_pools: bool = True) -> SeedData:
    train, id_test, ood = load_data(cfg, seed)
    shards = dataset.dirichlet_partition(train, cfg.federated.num_clients, cfg.dirichlet_beta,
                                         dataset.derive_seed(seed, PARTITION_TAG))
    if with_pools:
        shards = [dataset.build_background_pool(s, cfg.crl) for s in shards]
    return SeedData(train, id_test, ood, shards)


def manifest(data: SeedData) -> List[Dict]:
    client_of = {s.uid: sh.client_id for sh in data.shards for s in sh.samples}
    records = []
    for split, samples in (("train", data.train), ("id_test", data.id_test), ("ood_test", data.ood_test)):
        for r, s in zip(dataset.manifest_records(samples, split), samples):
            r["client_id"] = client_of.get(s.uid) if split == "train" else None
            records.append(r)
    return records


# -- run -----------------------------------------------------------------------

SUMMARY_FIELDS = ("arm", "seed", "id_acc", "ood_acc", "bg_conf", "bg_match")


def summarize(rows: Sequence[Dict]) -> List[Dict]:
    """Per (arm, seed) rows followed by mean and std rows per arm."""
    out = [dict(r) for r in rows]
    for arm in dict.fromkeys(r["arm"] for r in rows):
        mine = [r for r in rows if r["arm"] == arm]
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            agg = {"arm": arm, "seed": stat}
            for k in SUMMARY_FIELDS[2:]:
                agg[k] = float(fn([r[k] for r in mine]))
            out.append(agg)
    return out


def summary_csv(rows: Sequence[Dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in rows:
        w.writerow([r["arm"], r["seed"], *(f"{r[k]:.6f}" for k in SUMMARY_FIELDS[2:])])
    return buf.getvalue()


def format_summary(rows: Sequence[Dict]) -> str:
    lines = [f"{'arm':<16} {'seed':>5} {'id_acc':>8} {'ood_acc':>8} {'bg_conf':>8} {'bg_match':>9}"]
    for r in rows:
        lines.append(f"{r['arm']:<16} {str(r['seed']):>5} {r['id_acc']:8.4f} {r['ood_acc']:8.4f} "
                     f"{r['bg_conf']:8.4f} {r['bg_match']:9.4f}")
    return "\n".join(lines)


def run_experiment(cfg: ExperimentConfig, arms: Optional[Sequence[str]] = None,
                   seeds: Optional[Sequence[int]] = None, out_dir=None) -> List[Dict]:
    """Run every seed x arm, write reports under ``out_dir``; returns summary rows."""
    arms = list(arms or cfg.arms)
    seeds = list(seeds if seeds is not None else cfg.seeds)
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in seeds:
        data = prepare(cfg, seed, with_pools=any(a != "fedavg" for a in arms))
        seed_dir = out / f"seed{seed}"
        seed_dir.mkdir(exist_ok=True)
        dataset.write_manifest(seed_dir / "manifest.jsonl", manifest(data))
        evals = fedsim.EvalSets.build(data.id_test, data.ood_test, cfg.crl.backend, cfg.spurious.num_backgrounds)
        h, w, c = data.train[0].image.shape
        arch = tensor_nn.Architecture(in_channels=c, height=h, width=w, num_classes=cfg.spurious.num_classes)
        for arm in arms:
            fcfg = replace(cfg.federated, arm=arm, seed=seed)
            state = fedsim.run_federated(fcfg, data.shards, evals, arch)
            arm_dir = seed_dir / arm
            arm_dir.mkdir(exist_ok=True)
            (arm_dir / "history.csv").write_text(fedsim.history_csv(state.history, cfg.wall_clock))
            probe = evaluation.probe_from_inputs(state.global_params, evals.probe, cfg.spurious.num_backgrounds)
            report = {
                "arm": arm,
                "seed": seed,
                "config": cfg.raw,
                "history": fedsim.history_json(state.history),
                "probe": probe.to_dict(),
                "confusion": {
                    "id": evaluation.confusion_matrix(state.global_params, evals.id_set).tolist(),
                    "ood": evaluation.confusion_matrix(state.global_params, evals.ood_set).tolist(),
                },
            }
            if not cfg.wall_clock:
                for h in report["history"]:
                    h.pop("secs")
            (arm_dir / "report.json").write_text(fedsim.dumps(report) + "\n")
            tensor_nn.save_params(arm_dir / "model.fcaw", state.global_params)
            last = state.history[-1] if state.history else None
            rows.append({
                "arm": arm, "seed": seed,
                "id_acc": last.id_acc if last else evaluation.top1_accuracy(state.global_params, evals.id_set),
                "ood_acc": last.ood_acc if last else evaluation.top1_accuracy(state.global_params, evals.ood_set),
                "bg_conf": probe.mean_confidence,
                "bg_match": probe.confound_match_rate,
            })
    summary = summarize(rows)
    (out / "summary.csv").write_text(summary_csv(summary))
    (out / "summary.json").write_text(fedsim.dumps(summary) + "\n")
    return summary


# -- export --------------------------------------------------------------------

def export_augmented_corpus(cfg: ExperimentConfig, out_dir, limit: Optional[int] = None,
                            seed: Optional[int] = None) -> int:
    """Write sharpened / mask / composite triplets for training samples.

    Donor backgrounds come from the sample's own client pool. Bounding boxes
    and donor provenance go to ``index.jsonl``. Returns the number of image
    files written.
    """
    seed = cfg.seeds[0] if seed is None else seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare(cfg, seed)
    written = 0
    index = []
    for shard in data.shards:
        if limit is not None and len(index) >= limit:
            break
        rng = fedsim.client_rng(seed, None, shard.client_id, fedsim._DONOR)
        donors = rng.integers(len(shard.background_pool), size=len(shard))
        for i, s in enumerate(shard.samples):
            if limit is not None and len(index) >= limit:
                break
            sharpened = crl.sharpen_image(s.image, cfg.crl)
            region = crl.CausalRegion.from_mask(shard.masks[i])
            comp = image_ops.composite(shard.objects[i], region.mask, shard.background_pool[donors[i]],
                                       cfg.federated.alpha)
            stem = f"{len(index):05d}"
            image_ops.write_pnm(out / f"{stem}_sharpened.ppm", sharpened)
            image_ops.write_pnm(out / f"{stem}_mask.pgm", region.mask.astype(np.float64))
            image_ops.write_pnm(out / f"{stem}_composite.ppm", comp)
            written += 3
            index.append({
                "stem": stem, "uid": s.uid, "label": int(s.label), "background_id": s.background_id,
                "client_id": shard.client_id, "bbox": list(region.bbox),
                "donor_index": int(donors[i]), "donor_uid": shard.pool_sources[donors[i]],
            })
    with open(out / "index.jsonl", "w") as fh:
        for rec in index:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return written


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedcaug", description="Federated causal augmentation simulator")
    p.add_argument("--version", action="version", version=f"fedcaug {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train every seed x arm and write reports")
    run.add_argument("config")
    run.add_argument("--arm", choices=fedsim.ARMS, help="run only this arm")
    run.add_argument("--seed", type=int, help="run only this seed")
    run.add_argument("--out", help="output directory (overrides output_dir)")

    exp = sub.add_parser("export", help="write sharpened/mask/composite triplets")
    exp.add_argument("config")
    exp.add_argument("--out", required=True)
    exp.add_argument("--limit", type=int, help="export at most this many samples")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "export" and args.limit is not None and args.limit < 1:
            raise ConfigError("--limit", "must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            seeds = [args.seed] if args.seed is not None else None
            arms = [args.arm] if args.arm else None
            rows = run_experiment(cfg, arms, seeds, args.out)
            print(format_summary(rows))
        else:
            n = export_augmented_corpus(cfg, args.out, args.limit)
            print(f"wrote {n} files to {args.out}")
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
