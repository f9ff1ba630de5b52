"""Experiment orchestration and the ``t3po`` command line.

Layout of an experiment::

    <output_dir>/<config-hash>/config.json
                              /manifest.csv
                              /<seed>/checkpoint.pt
                              /<seed>/training_log.csv
                              /<seed>/scores_<scorer>.csv
    <output_dir>/report.csv, report.md
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import datakit, metrics, nnet, scoring, synthetic
from .datakit import DatasetError, SplitConfig
from .nnet import TrainConfig, TrainingError

log = logging.getLogger(__name__)

EXIT_OK, EXIT_DATA, EXIT_TRAIN, EXIT_CONSISTENCY, EXIT_UNSUPPORTED = 0, 2, 3, 4, 5
ROOT_ENV = "T3PO_DATASET_ROOT"

PROFILES = {
    # synthetic data, small CNN, CPU minutes
    "desk": {
        "backbone": "small_cnn",
        "pretrained": False,
        "train": {"epochs": 15, "batch_size": 64, "base_lr": 0.003},
    },
    # Kather tiles, ImageNet MobileNetV2; epochs 200 for Kather-5k, 20 for Kather-100k
    "paper": {
        "backbone": "mobilenet_v2",
        "pretrained": True,
        "train": {"epochs": 200, "batch_size": 128, "base_lr": 0.01},
    },
}


class ConsistencyError(RuntimeError):
    pass


class AlreadyDone(RuntimeError):
    pass


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``splits/kather5k_s1.json``."""
    return Path(str(resources.files("t3po") / "configs" / name))


def _resolve(path: str | Path, base: Path) -> Path:
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    if (base / p).exists():
        return base / p
    if bundled_config(str(p)).exists():
        return bundled_config(str(p))
    return base / p


@dataclass
class ExperimentConfig:
    dataset_root: str
    split_config: str
    output_dir: str = "runs"
    profile: str = "desk"
    backbone: str = "small_cnn"
    pretrained: bool = False
    dropout: float = 0.2
    train: TrainConfig = field(default_factory=TrainConfig)
    scorers: tuple[str, ...] = scoring.SCORERS
    seeds: tuple[int, ...] = tuple(range(10))
    geometry: int | None = None
    eval_batch_size: int = 256
    mc_passes: int = 32
    mc_mode: str = "predictive"
    synthetic: dict | None = None
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path = Path("."), profile: str | None = None) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        profile = profile or d.get("profile", "desk")
        if profile not in PROFILES:
            raise DatasetError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        merged = copy.deepcopy(PROFILES[profile])
        train = {**merged.pop("train"), **d.pop("train", {})}
        merged.update(d)
        merged["profile"] = profile
        if os.environ.get(ROOT_ENV):
            merged["dataset_root"] = os.environ[ROOT_ENV]
        for key in ("dataset_root", "split_config"):
            if key not in merged:
                raise DatasetError(f"experiment config lacks {key!r}")
        known = set(cls.__dataclass_fields__) - {"train", "base_dir"}
        unknown = set(merged) - known
        if unknown:
            raise DatasetError(f"unknown experiment config keys: {sorted(unknown)}")
        cfg = cls(train=TrainConfig.from_dict(train), base_dir=base_dir, **merged)
        cfg.scorers = tuple(cfg.scorers)
        cfg.seeds = tuple(int(s) for s in cfg.seeds)
        if not cfg.seeds or len(set(cfg.seeds)) != len(cfg.seeds):
            raise DatasetError("seeds must be nonempty and distinct")
        return cfg

    @classmethod
    def load(cls, path: str | Path, profile: str | None = None) -> "ExperimentConfig":
        path = Path(path)
        base_dir = path.parent
        if not path.exists() and bundled_config(str(path)).exists():
            # bundled configs write data and runs under the working directory
            path, base_dir = bundled_config(str(path)), Path(".")
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read experiment config {path}: {exc}") from exc
        return cls.from_dict(d, base_dir=base_dir, profile=profile)

    # paths -------------------------------------------------------------
    @property
    def root_path(self) -> Path:
        return _resolve(self.dataset_root, self.base_dir) if not Path(self.dataset_root).is_absolute() else Path(self.dataset_root)

    @property
    def split_path(self) -> Path:
        return _resolve(self.split_config, self.base_dir)

    def split(self) -> SplitConfig:
        try:
            return SplitConfig.load(self.split_path)
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read split config {self.split_path}: {exc}") from exc

    def semantic_dict(self) -> dict:
        """Fields that change results. Paths, seeds and scorer lists are excluded."""
        return {
            "split": self.split().to_dict(),
            "backbone": self.backbone,
            "pretrained": self.pretrained,
            "dropout": self.dropout,
            "train": {k: v for k, v in self.train.to_dict().items() if k != "seed"},
            "geometry": self.geometry,
            "synthetic": self.synthetic,
        }

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    @property
    def experiment_dir(self) -> Path:
        out = Path(self.output_dir)
        if not out.is_absolute():
            out = self.base_dir / out
        return out / self.config_hash

    def seed_dir(self, seed: int) -> Path:
        return self.experiment_dir / str(seed)

    @property
    def manifest_path(self) -> Path:
        return self.experiment_dir / "manifest.csv"

    def to_dict(self) -> dict:
        return {
            "dataset_root": str(self.dataset_root),
            "split_config": str(self.split_config),
            "output_dir": str(self.output_dir),
            "profile": self.profile,
            "backbone": self.backbone,
            "pretrained": self.pretrained,
            "dropout": self.dropout,
            "train": self.train.to_dict(),
            "scorers": list(self.scorers),
            "seeds": list(self.seeds),
            "geometry": self.geometry,
            "eval_batch_size": self.eval_batch_size,
            "mc_passes": self.mc_passes,
            "mc_mode": self.mc_mode,
            "synthetic": self.synthetic,
        }


def environment_fingerprint() -> dict:
    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "threads": torch.get_num_threads(),
    }


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# commands


def ensure_dataset(cfg: ExperimentConfig) -> Path:
    root = cfg.root_path
    if cfg.synthetic is not None and not root.exists():
        log.info("generating synthetic dataset at %s", root)
        synthetic.make_synthetic(root, **cfg.synthetic)
    return root


def make_splits(dataset_root, split_config: SplitConfig, out: str | Path, geometry=None) -> datakit.SplitAssignment:
    index = datakit.scan_dataset(dataset_root, geometry)
    assignment = datakit.build_split(index, split_config)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    datakit.write_manifest(assignment, out)
    return assignment


def cmd_make_splits(cfg: ExperimentConfig, out: str | Path | None = None) -> Path:
    out = Path(out) if out else cfg.manifest_path
    root = ensure_dataset(cfg)
    make_splits(root, cfg.split(), out, cfg.geometry)
    _write_json(cfg.experiment_dir / "config.json", {**cfg.to_dict(), "config_hash": cfg.config_hash, "semantic": cfg.semantic_dict()})
    return out


def _load_manifest(cfg: ExperimentConfig) -> datakit.SplitAssignment:
    if not cfg.manifest_path.exists():
        raise DatasetError(f"no split manifest at {cfg.manifest_path}; run `t3po make-splits` first")
    return datakit.read_manifest(cfg.manifest_path)


def cmd_train(cfg: ExperimentConfig, seed: int, overwrite: bool = False, loader=None) -> Path:
    assignment = _load_manifest(cfg)
    out = cfg.seed_dir(seed)
    ckpt_path = out / "checkpoint.pt"
    if ckpt_path.exists() and not overwrite:
        raise AlreadyDone(f"{ckpt_path} exists; pass --overwrite to retrain seed {seed}")
    out.mkdir(parents=True, exist_ok=True)
    loader = loader or datakit.TileLoader()
    train_cfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed})
    model = nnet.build_model(assignment.n_classes, cfg.backbone, cfg.pretrained, cfg.dropout, seed=seed)
    bs = train_cfg.batch_size
    steps = -(-len(assignment.train) // bs)
    ckpt, history = nnet.fit(
        model,
        lambda epoch: datakit.train_iterator(assignment, None, bs, seed, epoch, loader),
        lambda: datakit.eval_iterator(assignment, "val", cfg.eval_batch_size, loader),
        train_cfg,
        steps,
    )
    nnet.write_training_log(history, out / "training_log.csv")
    nnet.save_checkpoint(
        ckpt_path,
        model,
        ckpt,
        assignment.closed_classes,
        cfg.config_hash,
        extra={"seed": seed, "train": train_cfg.to_dict(), "environment": environment_fingerprint()},
    )
    return ckpt_path


def cmd_score(cfg: ExperimentConfig, seed: int, scorer_id: str, checkpoint=None, manifest=None, loader=None) -> Path:
    if scorer_id not in scoring.SCORERS:
        raise scoring.UnsupportedScorer(f"unsupported scorer {scorer_id!r}; choose from {', '.join(scoring.SCORERS)}")
    assignment = datakit.read_manifest(manifest) if manifest else _load_manifest(cfg)
    checkpoint = Path(checkpoint) if checkpoint else cfg.seed_dir(seed) / "checkpoint.pt"
    if not checkpoint.exists():
        raise DatasetError(f"no checkpoint at {checkpoint}; run `t3po train --seed {seed}` first")
    model, meta = nnet.load_checkpoint(checkpoint)
    if tuple(meta["class_names"]) != assignment.closed_classes:
        raise ConsistencyError(
            f"checkpoint classes {meta['class_names']} do not match manifest classes {list(assignment.closed_classes)}"
        )
    loader = loader or datakit.TileLoader()
    params = {"seed": seed, "n_passes": cfg.mc_passes, "dropout_rate": cfg.dropout, "mode": cfg.mc_mode}
    closed = scoring.score_split(model, datakit.eval_iterator(assignment, "test_closed", cfg.eval_batch_size, loader), scorer_id, params)
    opened = scoring.score_split(model, datakit.eval_iterator(assignment, "test_open", cfg.eval_batch_size, loader), scorer_id, params)
    out = checkpoint.parent / f"scores_{scorer_id}.csv"
    scoring.write_scores(out, closed, opened, assignment.closed_classes, seed)
    return out


def run_result_from_scores(path: str | Path, split: str) -> metrics.RunResult:
    rows = scoring.read_scores(path)
    if not rows:
        raise DatasetError(f"{path} holds no scores")
    closed = [r for r in rows if r["true_class"] != "OPEN"]
    opened = [r for r in rows if r["true_class"] == "OPEN"]
    if not closed or not opened:
        raise DatasetError(f"{path}: need both closed and open rows to compute AUROC")
    acc = metrics.accuracy([r["predicted_class"] for r in closed], [r["true_class"] for r in closed])
    auc = metrics.auroc([r["osr_score"] for r in closed], [r["osr_score"] for r in opened])
    return metrics.RunResult(split, rows[0]["scorer_id"], rows[0]["seed"], acc, auc, len(closed), len(opened))


def _split_label(split: dict) -> str:
    name = split.get("name") or "split"
    aliases = split.get("aliases") or []
    label = f"{split.get('dataset', '')} {name}".strip()
    return f"{label} ({aliases[0]})" if aliases else label


def collect_runs(output_dir: str | Path, split_meta: dict | None = None) -> tuple[list[metrics.RunResult], list[dict]]:
    """Gather RunResults from every score file under ``output_dir``.

    ``split_meta``, if given, is filled with label -> split config dict.
    """
    runs, sources = [], []
    for cfg_file in sorted(Path(output_dir).glob("*/config.json")):
        with open(cfg_file) as fh:
            split = json.load(fh)["semantic"]["split"]
        label = _split_label(split)
        if split_meta is not None:
            split_meta[label] = split
        for score_file in sorted(cfg_file.parent.glob("*/scores_*.csv")):
            r = run_result_from_scores(score_file, label)
            runs.append(r)
            sources.append({"split": label, "scorer_id": r.scorer_id, "seed": r.seed, "file": str(score_file), "sha256": file_sha256(score_file)})
    return runs, sources


def load_reference() -> dict:
    with open(bundled_config("expected/paper_tables.json")) as fh:
        return json.load(fh)


def reference_rows(aggs: list[metrics.AggregateResult], split_meta: dict, reference: dict | None = None) -> list[dict]:
    """Pair aggregates with published means where the dataset and split are known."""
    reference = reference or load_reference()
    tol = reference["tolerance"]
    rows = []
    for a in aggs:
        split = split_meta.get(a.split, {})
        ref = reference.get(split.get("dataset"), {}).get(split.get("name"), {}).get(a.scorer_id)
        if ref is None:
            continue
        acc, auc = a.mean_acc * 100, a.mean_auc * 100
        rows.append(
            {
                "split": a.split,
                "scorer_id": a.scorer_id,
                "n_runs": a.n_runs,
                "acc": round(acc, 2),
                "ref_acc": ref[0],
                "auc": round(auc, 2),
                "ref_auc": ref[1],
                "within_tolerance": abs(acc - ref[0]) <= tol["acc"] and abs(auc - ref[1]) <= tol["auc"],
            }
        )
    return rows


def markdown_table(aggs: list[metrics.AggregateResult]) -> str:
    splits = list(dict.fromkeys(a.split for a in aggs))
    scorers = list(dict.fromkeys(a.scorer_id for a in aggs))
    by = {(a.split, a.scorer_id): a for a in aggs}
    marks = {}
    for sp in splits:
        group = [a for a in aggs if a.split == sp]
        for metric in ("acc", "auc"):
            marks[sp, metric] = metrics.bold_rule(group, metric)

    def cell(a, sp, metric):
        if a is None:
            return "-"
        mean, ci = getattr(a, f"mean_{metric}") * 100, getattr(a, f"ci95_{metric}") * 100
        text = f"{mean:.2f} ± {ci:.2f}"
        best, bold = marks[sp, metric]
        if a.scorer_id in bold:
            text = f"**{text}**"
        if a.scorer_id == best:
            text = f"<u>{text}</u>"
        return text

    head = "| scorer | " + " | ".join(f"{sp} ACC | {sp} AUC" for sp in splits) + " |"
    rule = "|---|" + "---|---|" * len(splits)
    lines = [head, rule]
    for sc in scorers:
        cells = []
        for sp in splits:
            a = by.get((sp, sc))
            cells += [cell(a, sp, "acc"), cell(a, sp, "auc")]
        lines.append(f"| {sc} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(output_dir: str | Path) -> tuple[Path, Path]:
    output_dir = Path(output_dir)
    split_meta: dict = {}
    runs, sources = collect_runs(output_dir, split_meta)
    if not runs:
        raise DatasetError(f"no score files found under {output_dir}")
    groups: dict[tuple[str, str], list] = {}
    for r in runs:
        groups.setdefault((r.split, r.scorer_id), []).append(r)
    aggs = [metrics.aggregate(v) for v in groups.values()]
    csv_path = output_dir / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        fields = list(aggs[0].to_dict())
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for a in aggs:
            w.writerow(a.to_dict())
    md_path = output_dir / "report.md"
    lines = [
        "# Closed-set accuracy and closed/open AUROC (%)\n\n",
        "Mean ± 95% CI half-width over seeds. Underlined: best mean; bold: within the best scorer's CI.\n\n",
        markdown_table(aggs),
        "\n\n## Seeds aggregated\n\n",
    ]
    for a in aggs:
        lines.append(f"- {a.split} / {a.scorer_id}: {a.n_runs} run(s), seeds {' '.join(map(str, a.seeds))}\n")
    ref = reference_rows(aggs, split_meta)
    if ref:
        lines.append("\n## Against published means (ACC ±1.5, AUC ±3 points)\n\n")
        lines.append("| split | scorer | runs | ACC | published | AUC | published | within |\n|---|---|---|---|---|---|---|---|\n")
        for r in ref:
            lines.append(
                f"| {r['split']} | {r['scorer_id']} | {r['n_runs']} | {r['acc']:.2f} | {r['ref_acc']:.2f} | "
                f"{r['auc']:.2f} | {r['ref_auc']:.2f} | {'yes' if r['within_tolerance'] else 'no'} |\n"
            )
    lines.append("\n## Score files\n\n")
    for s in sources:
        lines.append(f"- `{s['file']}` sha256 {s['sha256']}\n")
    md_path.write_text("".join(lines))
    _write_json(output_dir / "report_sources.json", sources)
    return csv_path, md_path


def cmd_run(cfg: ExperimentConfig, overwrite: bool = False) -> tuple[Path, Path]:
    """make-splits, then train and score every seed, then report."""
    cmd_make_splits(cfg)
    loader = datakit.TileLoader()
    for seed in cfg.seeds:
        ckpt = cfg.seed_dir(seed) / "checkpoint.pt"
        if overwrite or not ckpt.exists():
            cmd_train(cfg, seed, overwrite=overwrite, loader=loader)
        for scorer in cfg.scorers:
            cmd_score(cfg, seed, scorer, loader=loader)
    return cmd_report(cfg.experiment_dir.parent)


# ---------------------------------------------------------------------------
# CLI


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="t3po", description="Open-set tile recognition by test-time transform prediction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=False):
        sp.add_argument("--config", help="experiment config JSON (bundled names such as experiments/desk.json work too)")
        sp.add_argument("--profile", choices=sorted(PROFILES), help="override the config's execution profile")
        if seed:
            sp.add_argument("--seed", type=int, required=True)

    sp = sub.add_parser("make-splits", help="write the closed/open split manifest")
    common(sp)
    sp.add_argument("--dataset-root")
    sp.add_argument("--split-config")
    sp.add_argument("--geometry", type=int)
    sp.add_argument("--out")

    sp = sub.add_parser("train", help="train one seed")
    common(sp, seed=True)
    sp.add_argument("--overwrite", action="store_true")

    sp = sub.add_parser("score", help="score closed and open test tiles with one scorer")
    common(sp, seed=True)
    sp.add_argument("--scorer", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest")

    sp = sub.add_parser("report", help="aggregate score files into CSV and markdown tables")
    common(sp)
    sp.add_argument("--experiment-dir", help="directory holding <config-hash>/ experiment folders")

    sp = sub.add_parser("run", help="make-splits, train and score all seeds, report")
    common(sp)
    sp.add_argument("--overwrite", action="store_true")

    sp = sub.add_parser("make-synthetic", help="write the synthetic tile dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-per-class", type=int, default=100)
    sp.add_argument("--tile-side", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    return p


def _need_config(args) -> ExperimentConfig:
    if not args.config:
        raise DatasetError("--config is required for this command")
    return ExperimentConfig.load(args.config, profile=args.profile)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "make-splits":
            if args.config:
                cfg = _need_config(args)
                out = cmd_make_splits(cfg, args.out)
            else:
                if not (args.dataset_root and args.split_config and args.out):
                    raise DatasetError("give --config, or all of --dataset-root, --split-config and --out")
                root = os.environ.get(ROOT_ENV) or args.dataset_root
                out = args.out
                make_splits(root, SplitConfig.load(_resolve(args.split_config, Path("."))), out, args.geometry)
            print(out)
        elif args.command == "train":
            print(cmd_train(_need_config(args), args.seed, args.overwrite))
        elif args.command == "score":
            print(cmd_score(_need_config(args), args.seed, args.scorer, args.checkpoint, args.manifest))
        elif args.command == "report":
            target = args.experiment_dir or _need_config(args).experiment_dir.parent
            for path in cmd_report(target):
                print(path)
        elif args.command == "run":
            for path in cmd_run(_need_config(args), args.overwrite):
                print(path)
        elif args.command == "make-synthetic":
            print(synthetic.make_synthetic(args.out, args.n_per_class, args.tile_side, args.seed))
    except scoring.UnsupportedScorer as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except ConsistencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except TrainingError as exc:
        print(f"error: {exc} (see training log under the seed directory)", file=sys.stderr)
        return EXIT_TRAIN
    except (DatasetError, AlreadyDone, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
