"""``maskfuse`` command line: run, synth, eval, bench."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import _kernels
from .features import SidecarError
from .io import DatasetError, DirectoryDataset, read_gt_points, read_ply, write_dataset, write_json
from .pipeline import PipelineConfig, default_provider, run
from .volume import FrameError

log = logging.getLogger("maskfuse")


class CliError(Exception):
    pass


def _threads() -> int | None:
    raw = os.environ.get("MASKFUSE_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"MASKFUSE_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise CliError("MASKFUSE_THREADS must be >= 0")
    return n or None


def _fractions(text: str | None) -> list[float]:
    if not text:
        return []
    try:
        out = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"--snapshot expects comma-separated fractions, got {text!r}") from None
    for f in out:
        if not 0 < f <= 1:
            raise CliError(f"snapshot fraction {f} outside (0, 1]")
    return out


def cmd_run(args) -> int:
    dataset = DirectoryDataset(args.data)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"{path}: config file not found")
        config = PipelineConfig.load(path)
    else:
        config = PipelineConfig()
    provider = default_provider(config, dataset.features_dir)
    fractions = _fractions(args.snapshot)
    result = run(dataset, config, provider, snapshots=fractions)
    out = Path(args.out)
    result.export(out, config)
    for f, snap in sorted(result.snapshots.items()):
        note = {"event": "snapshot", "fraction": f, "frames": snap.frames_processed, "tau_weight": snap.tau_weight}
        snap.export(out / f"snapshot_{int(round(f * 100))}", config, note)
    print(f"{len(result.instances)} instances, {result.points.shape[0]} points -> {out}")
    return 0


def cmd_synth(args) -> int:
    from .synth import default_scene, load_scene, make_dataset, stub_provider_for

    if args.spec:
        path = Path(args.spec)
        if not path.exists():
            raise CliError(f"{path}: scene file not found")
        try:
            spec = load_scene(path)
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(f"{path}: invalid scene file ({exc})") from None
    else:
        spec = default_scene()
    if args.overseg < 1:
        raise CliError("--overseg must be >= 1")
    ds = make_dataset(spec, overseg=args.overseg)
    provider = stub_provider_for(ds, seed=spec.seed)
    semantic = {}
    for fr in ds.frames:
        top = int(fr.mask_labels.max()) if fr.mask_labels is not None else 0
        rows = np.zeros((top, provider.semantic_dim))
        for label in np.unique(fr.mask_labels):
            if label > 0:
                rows[label - 1] = provider.semantic(fr.frame_id, int(label))
        semantic[fr.frame_id] = rows
    out = Path(args.out)
    write_dataset(out, ds.frames, ds.gt_points, ds.gt_labels, semantic)
    write_json(out / "scene.json", spec.source)
    print(f"{len(ds.frames)} frames, {ds.gt_points.shape[0]} GT points -> {out}")
    return 0


def cmd_eval(args) -> int:
    from .eval import evaluate

    pred = Path(args.pred)
    points, labels = read_ply(pred / "points.ply")
    inst_path = pred / "instances.json"
    if not inst_path.exists():
        raise CliError(f"{inst_path}: file not found")
    instances = json.loads(inst_path.read_text())
    gt_points, gt_labels = read_gt_points(args.gt)
    voxel_size = args.voxel_size
    if voxel_size is None:
        cfg = pred / "config.txt"
        voxel_size = PipelineConfig.load(cfg).voxel_size if cfg.exists() else PipelineConfig().voxel_size
    try:
        metrics = evaluate(points, labels, instances, gt_points, gt_labels, voxel_size)
    except ValueError as exc:
        raise CliError(f"{args.gt}: {exc}") from None
    out = Path(args.out) if args.out else pred / "metrics.json"
    write_json(out, metrics)
    print(" ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items())))
    return 0


def cmd_bench(args) -> int:
    from .bench import compare_merge_strategies

    found = _kernels.backends()
    if args.impl == "auto":
        name = _kernels.BACKEND
    elif args.impl in found:
        name = args.impl
    else:
        raise CliError(f"kernel backend {args.impl!r} is not available (have: {', '.join(found)})")
    if args.masks < 1 or args.merges < 0:
        raise CliError("--masks must be >= 1 and --merges >= 0")
    res = compare_merge_strategies(args.masks, args.merges, args.seed, kernels=found[name])
    print(f"backend={name} masks={res['masks']} merges={res['merges']}")
    print(f"mapping_table_ms={res['mapping_table_ms']:.3f}")
    print(f"naive_rewrite_ms={res['naive_rewrite_ms']:.3f}")
    print(f"speedup={res['speedup']:.2f}x")
    if not res["labelings_equal"]:
        print("error: mapping-table and rewrite labelings differ", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maskfuse", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="segment a dataset directory")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config", help="flat key=value config file")
    r.add_argument("--snapshot", help="comma-separated fractions, e.g. 0.25,0.5,0.75")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--spec", help="JSON scene description (default scene when omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--overseg", type=int, default=1, help="split each object mask into K parts")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="AP of an exported result against GT points")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", help="metrics file (default PRED/metrics.json)")
    e.add_argument("--voxel-size", type=float, default=None)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="mapping table vs voxel rewrite merge cost")
    b.add_argument("--masks", type=int, default=500)
    b.add_argument("--merges", type=int, default=50)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--impl", default="auto", help="kernel backend: auto, cython or python")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except (CliError, DatasetError, SidecarError, FrameError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
