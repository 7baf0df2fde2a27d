"""Command-line entry point: gen, register, train-mask, bench, check-grad."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import attention as att
from .errors import FormatError, HybridRegError
from .geom import read_ply
from .matching import Polarity
from .metrics import PROFILES, MetricsReport, PairReport, aggregate, evaluate_pair, fmt, summarize
from .pipeline import Estimator, MaskMode, PipelineConfig, register
from .scenegen.dataset import MANIFEST, WORKERS_ENV, DatasetConfig, generate_dataset, load_pair, read_manifest, resolve_workers
from .scenegen.pairs import OverlapBin, Split

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
COMMANDS = ("gen", "register", "train-mask", "bench", "check-grad")

# flag defaults; None means "decided by the command"
FLAG_DEFAULTS = {
    "seed": 0,
    "pairs": None,
    "split": "rigid-only",
    "overlap_bin": "any",
    "estimator": "lgr",
    "mask": "none",
    "polarity": "variance",
    "profile": "indoor",
    "out": None,
    "workers": None,
    "params": None,
    "data": None,
    "index": 0,
    "source": None,
    "target": None,
    "instances": 25,
}
# register polishes its single estimate by default; bench reports raw estimator output
REGISTER_POLISH = 20

log = logging.getLogger("hybridreg")


class UsageError(Exception):
    pass


# --- configuration ----------------------------------------------------------


def _tunables() -> dict[str, object]:
    """Config-file keys beyond the flags: pipeline and training fields with their defaults."""
    from .losses import TrainConfig

    out = {}
    for f in dataclasses.fields(PipelineConfig):
        out[f.name] = getattr(PipelineConfig(), f.name)
    for f in dataclasses.fields(TrainConfig):
        if f.name not in ("pipeline", "seed"):
            out[f.name] = getattr(TrainConfig(), f.name)
    return {k: v for k, v in out.items() if k not in FLAG_DEFAULTS}


def _coerce(key: str, raw: str, like):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, Polarity):
            return Polarity(raw.strip())
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(float(v) for v in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError:
        raise UsageError(f"config key {key}: cannot parse {raw!r}") from None


def read_config_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    out = {}
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve_config(args: argparse.Namespace) -> tuple[dict, dict]:
    """Merge defaults < config file < flags; returns (values, source per key)."""
    tun = _tunables()
    values = dict(FLAG_DEFAULTS)
    values.update(tun)
    source = {k: "default" for k in values}
    if args.config:
        for k, raw in read_config_file(args.config).items():
            if k not in values:
                raise UsageError(f"unknown config key: {k}")
            like = values[k]
            values[k] = raw if like is None else _coerce(k, raw, like)
            source[k] = "file"
    for k in FLAG_DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
            source[k] = "flag"
    if values["workers"] is None:
        values["workers"] = resolve_workers(None)
        if source["workers"] == "default" and WORKERS_ENV in os.environ:
            source["workers"] = "env"
    for k in ("seed", "pairs", "index", "instances", "workers"):
        if values[k] is not None and not isinstance(values[k], int):
            values[k] = _coerce(k, str(values[k]), 0)
    values["_source"] = source
    return values, source


def print_config(values: dict, source: dict, keys) -> None:
    for k in keys:
        print(f"# {k} = {values[k]} ({source[k]})", file=sys.stderr)


def pipeline_config(values: dict, **extra) -> PipelineConfig:
    kw = {f.name: values[f.name] for f in dataclasses.fields(PipelineConfig) if f.name in values}
    kw["seed"] = int(values["seed"])
    kw["polarity"] = Polarity(values["polarity"])
    kw.update(extra)
    return PipelineConfig(**kw)


def _choice(value, enum_cls, name):
    try:
        return enum_cls(value)
    except ValueError:
        choices = ", ".join(e.value for e in enum_cls)
        raise UsageError(f"--{name} must be one of: {choices}") from None


def _load_params(values):
    if values["params"] is None:
        return None
    p = Path(values["params"])
    if not p.is_file():
        raise UsageError(f"parameter file not found: {p}")
    return att.ParameterSet.load(p)


def _data_dir(values) -> Path:
    if values["data"] is None:
        raise UsageError("--data DIR is required")
    root = Path(values["data"])
    if not (root / MANIFEST).is_file():
        raise UsageError(f"manifest not found: {root / MANIFEST}")
    return root


# --- commands ---------------------------------------------------------------


def cmd_gen(values) -> int:
    pairs = 100 if values["pairs"] is None else values["pairs"]
    if pairs < 1:
        raise UsageError("--pairs must be at least 1")
    if values["out"] is None:
        raise UsageError("--out DIR is required")
    splits = [s.value for s in Split] if values["split"] == "all" else values["split"].split(",")
    bins = [b.value for b in OverlapBin] if values["overlap_bin"] == "all" else values["overlap_bin"].split(",")
    splits = tuple(_choice(s.strip(), Split, "split") for s in splits)
    bins = tuple(None if b.strip() == "any" else _choice(b.strip(), OverlapBin, "overlap-bin") for b in bins)
    cfg = DatasetConfig(seed=values["seed"], n_pairs=pairs, splits=splits, overlap_bins=bins)
    records = generate_dataset(cfg, values["out"], values["workers"])
    counts: dict[tuple[str, str], int] = {}
    for r in records:
        counts[(r.split, r.overlap_bin)] = counts.get((r.split, r.overlap_bin), 0) + 1
    print(f"seed: {values['seed']}")
    for (s, b), n in sorted(counts.items()):
        print(f"{s} {b}: {n}")
    print(f"total: {len(records)}")
    return EXIT_OK


def cmd_register(values) -> int:
    est = _choice(values["estimator"], Estimator, "estimator")
    mode = _choice(values["mask"], MaskMode, "mask")
    params = _load_params(values)
    if mode is MaskMode.LEARNED and params is None:
        raise UsageError("--mask learned needs --params FILE")
    polish = REGISTER_POLISH if values["_source"]["polish_iters"] == "default" else values["polish_iters"]
    cfg = pipeline_config(values, polish_iters=polish)
    pair = None
    if values["source"] is not None or values["target"] is not None:
        for k in ("source", "target"):
            if values[k] is None or not Path(values[k]).is_file():
                raise UsageError(f"input file not found: {values[k]}")
        src, tgt = read_ply(values["source"]), read_ply(values["target"])
    else:
        root = _data_dir(values)
        records = read_manifest(root / MANIFEST)
        idx = values["index"]
        if not 0 <= idx < len(records):
            raise UsageError(f"--index {idx} outside 0..{len(records) - 1}")
        for k in ("source", "target", "gt_correspondences"):
            path = root / getattr(records[idx], k)
            if not path.is_file():
                raise UsageError(f"input file not found: {path}")
        pair = load_pair(records[idx], root)
        src, tgt = pair.source, pair.target
    reg = register(src, tgt, cfg, est, mode, params)
    lines = [f"seed: {values['seed']}", f"estimator: {est.value}", f"mask: {mode.value}", reg.result.to_record().rstrip()]
    if pair is not None:
        rep = evaluate_pair(
            reg.result.transform, pair.gt_transform, pair.gt_correspondences, reg.point_c,
            src.points, tgt.points, PROFILES[values["profile"]],
        )
        lines += [
            f"rmse_m: {fmt(rep.rmse_m)}", f"ir: {fmt(rep.ir)}", f"rre_deg: {fmt(rep.rre_deg)}",
            f"rte_m: {fmt(rep.rte_m)}", f"success: {str(rep.success).lower()}",
        ]
    text = "\n".join(lines) + "\n"
    if values["out"]:
        Path(values["out"]).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _bench_one(job):
    root, record, cfg, est, mode, params, thresholds = job
    pair = load_pair(record, root)
    try:
        reg = register(pair.source, pair.target, cfg, est, mode, params)
    except HybridRegError as exc:
        return None, f"pair {record.index}: {type(exc).__name__}: {exc}", record
    rep = evaluate_pair(
        reg.result.transform, pair.gt_transform, pair.gt_correspondences, reg.point_c,
        pair.source.points, pair.target.points, thresholds, record.split, record.overlap_bin,
    )
    return rep, None, record


def cmd_bench(values) -> int:
    root = _data_dir(values)
    records = read_manifest(root / MANIFEST)
    if not records:
        raise UsageError(f"empty manifest: {root / MANIFEST}")
    if values["pairs"] is not None:
        records = records[: values["pairs"]]
    est = _choice(values["estimator"], Estimator, "estimator")
    mode = _choice(values["mask"], MaskMode, "mask")
    params = _load_params(values)
    if mode is MaskMode.LEARNED and params is None:
        raise UsageError("--mask learned needs --params FILE")
    if values["profile"] not in PROFILES:
        raise UsageError(f"--profile must be one of: {', '.join(PROFILES)}")
    thresholds = PROFILES[values["profile"]]
    cfg = pipeline_config(values)
    jobs = [(root, r, cfg, est, mode, params, thresholds) for r in records]
    workers = values["workers"]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_bench_one, jobs))
    else:
        results = [_bench_one(j) for j in jobs]
    reports, failed = [], 0
    for rep, err, rec in results:
        if rep is None:
            failed += 1
            print(err, file=sys.stderr)
            rep = PairReport(float("inf"), 0.0, 180.0, float("inf"), False, rec.split, rec.overlap_bin)
        reports.append(rep)
    report = aggregate(reports, thresholds)
    if len(report.per_split) > 1:
        report = MetricsReport(report.per_pair, report.per_split + [summarize(reports, thresholds)])
    text = f"# seed: {values['seed']}\n" + report.to_csv()
    if values["out"]:
        Path(values["out"]).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_train_mask(values) -> int:
    from .losses import TrainConfig, mean_sigma_by_motion, prepare_training_pair, train_toy

    root = _data_dir(values)
    records = read_manifest(root / MANIFEST)
    if values["pairs"] is not None:
        records = records[: values["pairs"]]
    if not records:
        raise UsageError("no training pairs")
    if values["out"] is None:
        raise UsageError("--out DIR is required")
    tkw = {f.name: values[f.name] for f in dataclasses.fields(TrainConfig) if f.name in values and f.name not in ("pipeline", "seed")}
    cfg = TrainConfig(**tkw, seed=values["seed"], pipeline=pipeline_config(values))
    prepared = [prepare_training_pair(load_pair(r, root), cfg) for r in records]
    params = _load_params(values)
    if params is None:
        d = prepared[0].fp.descriptors.d
        params = att.init_params(np.random.default_rng(values["seed"]), d, cfg.pipeline.d_t, cfg.pipeline.hidden, cfg.pipeline.blocks)
    result = train_toy(params, None, cfg, prepared=prepared)
    out = Path(values["out"])
    out.mkdir(parents=True, exist_ok=True)
    result.params.save(out / "mask_params.bin")
    result.write_csv(out / "loss.csv")
    result.write_csv(out / "loss_smoothed.csv", smoothed=True)
    moving, static = mean_sigma_by_motion(result.params, prepared)
    print(f"seed: {values['seed']}")
    if result.stage1_initial is not None:
        print(f"stage1_loss: {fmt(result.stage1_initial)} -> {fmt(result.stage1_final)}")
        print(f"stage1_plain_l1: {fmt(result.plain_l1[0])} -> {fmt(result.plain_l1[1])}")
    print(f"mean_sigma_sq_nonrigid: {fmt(moving)}")
    print(f"mean_sigma_sq_background: {fmt(static)}")
    print(f"params: {out / 'mask_params.bin'}")
    return EXIT_OK


def cmd_check_grad(values) -> int:
    from .checks import KINDS, TOLERANCE, gradient_suite

    n = values["instances"]
    if n < 1:
        raise UsageError("--instances must be at least 1")
    results = gradient_suite(values["seed"], n)
    print(f"seed: {values['seed']}")
    for kind in KINDS:
        errs = [r.max_rel_error for r in results if r.kind == kind]
        bad = sum(e > TOLERANCE for e in errs)
        print(f"{kind}: instances {len(errs)} max_rel_error {fmt(max(errs))} failed {bad}")
    ok = all(r.passed for r in results)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


HANDLERS = {
    "gen": cmd_gen,
    "register": cmd_register,
    "train-mask": cmd_train_mask,
    "bench": cmd_bench,
    "check-grad": cmd_check_grad,
}
# which effective settings each command prints at startup
SHOWN = {
    "gen": ("seed", "pairs", "split", "overlap_bin", "out", "workers"),
    "register": ("seed", "estimator", "mask", "polarity", "profile", "params", "data", "index", "source", "target"),
    "train-mask": ("seed", "pairs", "data", "out", "params", "stage1_epochs", "stage2_epochs", "lr"),
    "bench": ("seed", "pairs", "estimator", "mask", "polarity", "profile", "data", "out", "workers", "params"),
    "check-grad": ("seed", "instances"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--seed", type=int)
        p.add_argument("--config", help="key=value file; flags override it")
        p.add_argument("--out")
        p.add_argument("--workers", type=int)
        if name in ("gen", "bench", "train-mask"):
            p.add_argument("--pairs", type=int)
        if name == "gen":
            p.add_argument("--split", help="rigid-only, nonrigid-10-30, nonrigid-30-50, all, or a comma list")
            p.add_argument("--overlap-bin", dest="overlap_bin", help="high, lo, any, all, or a comma list")
        if name in ("register", "bench", "train-mask"):
            p.add_argument("--data", help="dataset directory holding the manifest")
            p.add_argument("--params", help="parameter file")
        if name in ("register", "bench"):
            p.add_argument("--estimator", choices=[e.value for e in Estimator])
            p.add_argument("--mask", choices=[m.value for m in MaskMode])
            p.add_argument("--polarity", choices=[q.value for q in Polarity])
            p.add_argument("--profile", choices=list(PROFILES))
        if name == "register":
            p.add_argument("--index", type=int)
            p.add_argument("--source")
            p.add_argument("--target")
        if name == "check-grad":
            p.add_argument("--instances", type=int, help="instances per checked function")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        values, source = resolve_config(args)
        print_config(values, source, SHOWN[args.command])
        return HANDLERS[args.command](values)
    except (UsageError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except HybridRegError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
