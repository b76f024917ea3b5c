"""Command-line experiment runner.

Stages read earlier stages' artifacts from the output directory and write
their own next to them::

    plcr synth --out runs/demo
    plcr pretrain --out runs/demo
    plcr prompt-train --out runs/demo
    plcr eval --out runs/demo
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .backbone import NumericalError, FrozenParamsError
from .config import ExperimentConfig, load_config, save_config
from .corpus import (
    DOMAINS,
    DomainVocab,
    format_statistics,
    read_log,
    read_manifest,
    write_log,
    write_manifest,
)
from .eval import VARIANTS, MetricsReport, build_variant, evaluate, format_table
from .model import build_model
from .pipeline import Dataset, prepare_dataset, pretrain_backbone
from .prompt import normalize_layout
from .synthgen import gen_dual_domain
from .training import train_prompts

logger = logging.getLogger("plcr")

OUT_ENV = "PLCR_OUT"
EXIT_OK, EXIT_USAGE, EXIT_PRECONDITION, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("ingest", "synth", "pretrain", "prompt-train", "eval", "ablate", "sweep", "report")
CSV_FIELDS = ["dataset", "domain", "variant", "metric", "K", "value", "seed", "dataset_fingerprint"]


class ArtifactError(RuntimeError):
    """A required upstream artifact is missing or inconsistent."""


class UsageError(RuntimeError):
    pass


# ---------------------------------------------------------------- artifacts


def require(path: Path) -> Path:
    if not path.exists():
        raise ArtifactError(f"missing upstream artifact: {path}")
    return path


def dtype_of(cfg: ExperimentConfig) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[cfg.run.dtype]


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def provenance(cfg: ExperimentConfig) -> dict:
    return {"config_fingerprint": cfg.fingerprint(), "dataset_fingerprint": cfg.dataset_fingerprint()}


def save_dataset(data: Dataset, cfg: ExperimentConfig, out: Path) -> None:
    ddir = out / "data"
    ddir.mkdir(parents=True, exist_ok=True)
    write_manifest(data.splits, ddir / "manifest.jsonl")
    stats = data.statistics()
    meta = {
        "vocab": data.vocab.to_dict(),
        "split_seeds": {d: data.splits[d].seed for d in DOMAINS},
        "name": cfg.data.name,
        **provenance(cfg),
    }
    write_json(ddir / "dataset.json", meta)
    write_json(ddir / "stats.json", stats)
    (ddir / "stats.txt").write_text(format_statistics(stats) + "\n", encoding="utf-8")


def load_dataset(out: Path) -> tuple[Dataset, dict]:
    ddir = out / "data"
    meta = json.loads(require(ddir / "dataset.json").read_text(encoding="utf-8"))
    splits = read_manifest(require(ddir / "manifest.jsonl"), meta["split_seeds"])
    vocab = DomainVocab.from_dict(meta["vocab"])
    examples = {d: splits[d].train + splits[d].validation + splits[d].test for d in DOMAINS}
    return Dataset(vocab, {}, examples, splits), meta


def load_frozen(path: Path):
    backbone, header = ckpt.load_backbone(require(path))
    if not backbone.frozen:
        raise ArtifactError(f"{path} holds an unfrozen backbone")
    return backbone, header


def check_dataset(meta: dict, header_meta: dict, what: Path) -> None:
    want = meta["dataset_fingerprint"]
    got = header_meta.get("dataset_fingerprint")
    if got is not None and got != want:
        raise ArtifactError(f"{what} was built from dataset {got}, current data is {want}")


# ---------------------------------------------------------------- stages


def stage_ingest(cfg: ExperimentConfig, out: Path, seed: int) -> Dataset:
    if cfg.data.source == "synth":
        path_a, path_b = out / "data" / "A.tsv", out / "data" / "B.tsv"
    else:
        path_a, path_b = Path(cfg.data.path_a), Path(cfg.data.path_b)
    log_a, log_b = read_log(require(path_a), "A"), read_log(require(path_b), "B")
    for log in (log_a, log_b):
        if log.malformed:
            logger.warning("domain %s: skipped %d malformed lines", log.domain, log.malformed)
    data = prepare_dataset(
        log_a, log_b, k=cfg.data.kcore, max_len=cfg.backbone.max_len, seed=cfg.data.split_seed,
        merge_validation=cfg.data.merge_validation, iterate_kcore=cfg.data.kcore_iterate,
        train_fraction={"A": cfg.data.train_fraction_a, "B": cfg.data.train_fraction_b},
    )
    save_dataset(data, cfg, out)
    print(format_statistics(data.statistics()))
    return data


def stage_synth(cfg: ExperimentConfig, out: Path, seed: int) -> Dataset:
    if cfg.data.source != "synth":
        raise UsageError('synth needs data.source = "synth"')
    log_a, log_b = gen_dual_domain(cfg.synth)
    ddir = out / "data"
    ddir.mkdir(parents=True, exist_ok=True)
    write_log(log_a, ddir / "A.tsv")
    write_log(log_b, ddir / "B.tsv")
    return stage_ingest(cfg, out, seed)


def stage_pretrain(cfg: ExperimentConfig, out: Path, seed: int, domains=DOMAINS, name="backbone.ckpt"):
    data, meta = load_dataset(out)
    bcfg = cfg.backbone
    bcfg.seed = seed
    backbone = pretrain_backbone(data, bcfg, domains, dtype_of(cfg))
    ckpt.save_backbone(out / name, backbone, {**provenance(cfg), "domains": list(domains), "seed": seed})
    logger.info("wrote %s", out / name)
    return backbone


def _ranges_meta(data: Dataset) -> dict:
    return {d: [r.start, r.stop] for d, r in data.id_ranges.items()}


def train_variant(cfg: ExperimentConfig, out: Path, data: Dataset, meta: dict, variant: str,
                  seed: int, target: Path):
    """Train one variant's prompts and write its checkpoint and training log into ``target``."""
    backbone, header = load_frozen(out / "backbone.ckpt")
    check_dataset(meta, header["meta"], out / "backbone.ckpt")
    singles = None
    if variant == "single_backbone":
        singles = {}
        for d in DOMAINS:
            path = out / f"backbone_{d}.ckpt"
            if not path.exists():
                stage_pretrain(cfg, out, cfg.backbone.seed, (d,), path.name)
            singles[d], h = load_frozen(path)
            check_dataset(meta, h["meta"], path)
    base = build_model(backbone, data.id_ranges, cfg.prompt, seed=seed)
    model = build_variant(variant, base, cfg.prompt, seed=seed, single_backbones=singles)
    tcfg = cfg.train
    tcfg.seed = seed
    target.mkdir(parents=True, exist_ok=True)
    model, records = train_prompts(tcfg, data.splits, model, log_path=target / "train_log.jsonl")
    pcfg = build_variant_cfg(variant, cfg)
    ckpt.save_prompts(target / "prompts.ckpt", model, pcfg,
                      {**provenance(cfg), "id_ranges": _ranges_meta(data), "seed": seed,
                       "backbones": {d: (f"backbone_{d}.ckpt" if singles else "backbone.ckpt")
                                     for d in DOMAINS}})
    return model


def build_variant_cfg(variant: str, cfg: ExperimentConfig):
    from .eval import variant_structure

    return variant_structure(variant, cfg.prompt)["cfg"]


def stage_prompt_train(cfg: ExperimentConfig, out: Path, seed: int):
    data, meta = load_dataset(out)
    return train_variant(cfg, out, data, meta, cfg.run.variant, seed, out)


def load_trained(out: Path, target: Path):
    path = require(target / "prompts.ckpt")
    _, header = ckpt.read_container(path)
    names = header["meta"].get("backbones", {d: "backbone.ckpt" for d in DOMAINS})
    backbones = {d: load_frozen(out / names[d])[0] for d in DOMAINS}
    return ckpt.load_prompts(path, backbones)


def write_report(report: MetricsReport, target: Path, fingerprint: str) -> None:
    write_json(target / "metrics.json", {**report.to_dict(), "percent": report.percent()})
    with open(target / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in report.rows():
            w.writerow({**row, "value": repr(row["value"]), "dataset_fingerprint": fingerprint})
    (target / "metrics.txt").write_text(format_table([report]) + "\n", encoding="utf-8")


def stage_eval(cfg: ExperimentConfig, out: Path, seed: int, target: Path | None = None) -> MetricsReport:
    target = target or out
    data, meta = load_dataset(out)
    model, header = load_trained(out, target)
    check_dataset(meta, header["meta"], target / "prompts.ckpt")
    report = evaluate(data.test_parts(), model, header["variant"], seed=header["meta"].get("seed", seed),
                      fingerprint=header["meta"].get("config_fingerprint", ""), dataset=meta["name"])
    write_report(report, target, meta["dataset_fingerprint"])
    print(format_table([report]))
    return report


def stage_ablate(cfg: ExperimentConfig, out: Path, seed: int) -> list[MetricsReport]:
    data, meta = load_dataset(out)
    reports = []
    for s in cfg.run.seeds:
        for variant in VARIANTS:
            target = out / "ablation" / variant / f"seed{s}"
            train_variant(cfg, out, data, meta, variant, s, target)
            reports.append(stage_eval(cfg, out, s, target))
    rows = [r for rep in reports for r in rep.rows()]
    _write_rows(out / "ablation.csv", rows, meta["dataset_fingerprint"])
    text = format_table(_mean_reports(reports))
    (out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return reports


def _write_rows(path: Path, rows: list[dict], fingerprint: str, extra: tuple[str, ...] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, list(extra) + CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({**row, "value": repr(row["value"]), "dataset_fingerprint": fingerprint})


def _mean_reports(reports: list[MetricsReport]) -> list[MetricsReport]:
    by_variant: dict[str, list[MetricsReport]] = {}
    for r in reports:
        by_variant.setdefault(r.variant, []).append(r)
    out = []
    for variant, group in by_variant.items():
        metrics = {
            d: {m: sum(r.metrics[d][m] for r in group) / len(group) for m in group[0].metrics[d]}
            for d in group[0].metrics
        }
        out.append(MetricsReport(metrics, group[0].counts, variant))
    return out


SWEEP_KEYS = {"dropout": "prompt.dropout", "m1": "prompt.m1", "layout": "prompt.layout"}


def stage_sweep(cfg: ExperimentConfig, out: Path, seed: int, grid: str = "all", jobs: int = 1) -> list[dict]:
    from .config import dump_config, parse_config

    data, meta = load_dataset(out)
    require(out / "backbone.ckpt")
    params = list(SWEEP_KEYS) if grid == "all" else [grid]
    values = {"dropout": cfg.run.sweep_dropout, "m1": cfg.run.sweep_m1, "layout": cfg.run.sweep_layout}
    all_rows = []
    for param in params:
        cells = []
        for value in values[param]:
            cell_cfg = parse_config(dump_config(cfg))
            cell_cfg.set(SWEEP_KEYS[param], json.dumps(value))
            if param == "layout":
                cell_cfg.prompt.layout = normalize_layout(value)
            cells.append((param, value, cell_cfg))
        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(jobs) as pool:
                results = list(pool.map(_sweep_cell, [(c, str(out), seed) for c in cells]))
        else:
            results = [_sweep_cell((c, str(out), seed)) for c in cells]
        rows = [row for cell_rows in results for row in cell_rows]
        _write_rows(out / "sweep" / f"sweep_{param}.csv", rows, meta["dataset_fingerprint"],
                    extra=("param", "param_value"))
        _plot_sweep(rows, param, out / "sweep" / f"sweep_{param}.png")
        all_rows += rows
    return all_rows


def _sweep_cell(args) -> list[dict]:
    (param, value, cell_cfg), out, seed = args
    out = Path(out)
    data, meta = load_dataset(out)
    target = out / "sweep" / param / str(value)
    train_variant(cell_cfg, out, data, meta, "full", seed, target)
    report = stage_eval(cell_cfg, out, seed, target)
    return [{"param": param, "param_value": value, **row} for row in report.rows()]


def _plot_sweep(rows: list[dict], param: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, metric in zip(axes, ("HR", "NDCG")):
        for d in DOMAINS:
            for k in (10, 20):
                sel = [r for r in rows if r["domain"] == d and r["metric"] == metric and r["K"] == k]
                if not sel:
                    continue
                xs = [str(r["param_value"]) for r in sel]
                ax.plot(xs, [100 * r["value"] for r in sel], marker="o", label=f"{d} @{k}")
        ax.set_xlabel(param)
        ax.set_ylabel(f"{metric} (%)")
        ax.legend(fontsize=7)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def stage_report(cfg: ExperimentConfig, out: Path, seed: int, inputs: list[str] | None = None) -> str:
    paths = [Path(p) for p in inputs] if inputs else sorted(
        p for p in out.rglob("metrics.csv"))
    if not paths:
        raise ArtifactError(f"no metrics.csv found under {out}")
    rows = []
    for p in paths:
        with open(require(p), encoding="utf-8") as fh:
            rows += list(csv.DictReader(fh))
    fps = {r["dataset_fingerprint"] for r in rows}
    if len(fps) > 1:
        raise ArtifactError(f"refusing to aggregate rows from different datasets: {sorted(fps)}")
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        key = (r["dataset"], r["variant"], r["domain"], r["metric"], int(r["K"]))
        groups.setdefault(key, []).append(float(r["value"]))
    agg_rows = []
    reports: dict[str, MetricsReport] = {}
    for (dataset, variant, domain, metric, k), vals in sorted(groups.items()):
        mean = sum(vals) / len(vals)
        agg_rows.append({"dataset": dataset, "domain": domain, "variant": variant, "metric": metric,
                         "K": k, "value": mean, "seed": f"mean_of_{len(vals)}"})
        rep = reports.setdefault(variant, MetricsReport({}, {}, variant))
        rep.metrics.setdefault(domain, {})[f"{metric}@{k}"] = mean
    _write_rows(out / "report.csv", agg_rows, fps.pop())
    order = [v for v in VARIANTS if v in reports] + [v for v in reports if v not in VARIANTS]
    text = format_table([reports[v] for v in order])
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return text


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plcr", description="Prompt-learning cross-domain sequential recommendation")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat section.key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"artifact directory (default ${OUT_ENV} or ./plcr_out)")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--schedule", choices=("sequential", "interleaved"))
    p.add_argument("--layout", choices=("front", "middle", "end"))
    p.add_argument("--m1", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--grid", choices=("all", *SWEEP_KEYS), default="all", help="sweep: parameter to vary")
    p.add_argument("--jobs", type=int, default=1, help="sweep: parallel cells")
    p.add_argument("--inputs", nargs="*", help="report: metrics CSVs to aggregate")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_overrides(extra: list[str]) -> list[tuple[str, str]]:
    """``--section.key value`` pairs left over after the named flags."""
    pairs = []
    i = 0
    while i < len(extra):
        flag = extra[i]
        if not flag.startswith("--") or "." not in flag:
            raise UsageError(f"unrecognised argument {flag!r}")
        if "=" in flag:
            key, value = flag[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"{flag} needs a value")
            key, value = flag[2:], extra[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


def resolve_config(args, extra: list[str]) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for key, value in parse_overrides(extra):
        cfg.set(key, value)
    if args.seed is not None:
        cfg.run.seeds = [args.seed]
    if args.variant:
        cfg.run.variant = args.variant
    if args.schedule:
        cfg.set("train.schedule", args.schedule)
    if args.layout:
        cfg.prompt.layout = normalize_layout(args.layout)
    if args.m1 is not None:
        cfg.prompt.m1 = args.m1
    if args.dropout is not None:
        cfg.prompt.dropout = args.dropout
    return cfg


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, extra)
    except (UsageError, KeyError, ValueError, OSError) as exc:
        print(f"plcr: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out or os.environ.get(OUT_ENV) or "plcr_out")
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.run.seeds[0]
    torch.manual_seed(seed)
    stages = {
        "ingest": stage_ingest, "synth": stage_synth, "pretrain": stage_pretrain,
        "prompt-train": stage_prompt_train, "eval": stage_eval, "ablate": stage_ablate,
        "report": lambda c, o, s: stage_report(c, o, s, args.inputs),
        "sweep": lambda c, o, s: stage_sweep(c, o, s, args.grid, args.jobs),
    }
    try:
        save_config(cfg, out / f"config.{args.command}.txt")
        stages[args.command](cfg, out, seed)
    except UsageError as exc:
        print(f"plcr: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArtifactError, FileNotFoundError, ckpt.CheckpointError, FrozenParamsError) as exc:
        print(f"plcr: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except NumericalError as exc:
        print(f"plcr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
