"""Batch command-line front-end.

Verbs: synth (emit a synthetic scan), project (scans -> view images),
flow (align/fuse at pyramid scales), refine (point-level fusion head or
KNN smoothing), eval (label metrics), loss (composite loss breakdown),
bench (pipeline throughput).

Exit codes: 0 success, 1 processing failure, 2 usage/config error.
Every command is deterministic given its seed, config, and inputs;
reruns produce byte-identical output files at any --jobs level.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import config as cfgmod
from .bev import project_bev
from .goldenio import (
    FormatError,
    load_attention_params,
    load_kpconv_params,
    read_blocks,
    read_view_image,
    write_view_image,
)
from .head import KpconvParams, argmax_labels, fuse_predictions, knn_postprocess
from .ingest import (
    CLASSMAP_PRESETS,
    ClassMap,
    ConfigError,
    MalformedScanError,
    PairingError,
    attach_labels,
    load_labels,
    load_scan,
    synth_scan,
    write_labels,
    write_scan,
)
from .losses import LossWeights, cross_entropy, loss_total, lovasz_softmax
from .metrics import ConfusionMatrix, accuracy, fwiou, miou
from .pipeline import PipelineConfig, make_head_params, make_maps, make_params, run_pipeline
from .rv import project_rv_original, project_rv_scanunfold, valid_projection_rate


class ProcessingError(RuntimeError):
    pass


def _load_classmap(name: str) -> ClassMap:
    if name in CLASSMAP_PRESETS:
        return CLASSMAP_PRESETS[name]
    if os.path.exists(name):
        return ClassMap.from_file(name)
    raise ConfigError(f"classmap {name!r} is neither a preset nor a file")


def _pipeline_config(args) -> tuple[dict, PipelineConfig]:
    cfg = cfgmod.load_config(getattr(args, "preset", "semantickitti"), getattr(args, "config", None))
    kwargs = {}
    if getattr(args, "scales", None):
        kwargs["scales"] = tuple(float(s) for s in args.scales.split(","))
    for name in ("channels", "kernel_size", "attention", "variant"):
        value = getattr(args, name, None)
        if value is not None:
            kwargs[name] = value
    pc = PipelineConfig(rv=cfgmod.rv_config(cfg), bev=cfgmod.bev_config(cfg), **kwargs)
    return cfg, pc


def _json_out(doc: dict, out_path: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        print(text)


def _require_readable(paths) -> None:
    for p in paths:
        if not os.path.exists(p):
            raise FileNotFoundError(p)


def _fan_out(items, worker, jobs: int):
    """Run worker over items with a bounded pool; results in input order."""
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(worker, items))
    return [worker(item) for item in items]


def cmd_synth(args) -> int:
    cfg = cfgmod.load_config(args.preset, args.config)
    sc = cfgmod.synth_config(
        cfg, dropout=args.dropout, order=args.order, beam_layout=args.layout
    )
    cloud = synth_scan(sc, args.seed)
    with open(args.out, "wb") as f:
        f.write(write_scan(cloud))
    if args.labels_out:
        with open(args.labels_out, "wb") as f:
            f.write(write_labels(cloud.labels))
    print(f"scan={args.out} points={len(cloud)} beams={sc.num_beams} dropout={sc.dropout}")
    return 0


def cmd_project(args) -> int:
    _require_readable(args.scans)
    if args.labels and len(args.labels) != len(args.scans):
        raise ConfigError(f"{len(args.labels)} label files for {len(args.scans)} scans")
    cfg, pc = _pipeline_config(args)
    cmap = _load_classmap(args.classmap) if args.labels else None
    # label files from this toolkit already carry train ids; --remap raw
    # opts into the classmap's raw -> train mapping for dataset files
    label_map = cmap if (cmap and args.remap == "raw") else (
        ClassMap.identity(cmap.num_classes, cmap.ignore_id) if cmap else None
    )
    os.makedirs(args.out, exist_ok=True)
    project_rv = project_rv_scanunfold if pc.variant == "scanunfold" else project_rv_original

    def one(pair):
        scan_path, label_path = pair
        cloud = load_scan(scan_path)
        if label_path:
            cloud = attach_labels(cloud, load_labels(label_path, label_map))
        stem = os.path.splitext(os.path.basename(scan_path))[0]
        lines = []
        empty = cmap.ignore_id if cmap else -1
        if args.view in ("rv", "both"):
            img = project_rv(cloud, pc.rv, empty_label=empty)
            out = os.path.join(args.out, f"{stem}.rv.gfvw")
            write_view_image(out, img.features, img.point_index)
            if img.labels is not None:
                write_view_image(
                    os.path.join(args.out, f"{stem}.rv_labels.gfvw"),
                    img.labels[..., None].astype("<i4"),
                    img.point_index,
                )
            rate = valid_projection_rate(img)
            lines.append(f"scan={scan_path} view=rv variant={pc.variant} rate={rate:.4f}")
            if args.plot:
                _plot_range_image(img, os.path.join(args.out, f"{stem}.rv.png"))
        if args.view in ("bev", "both"):
            img = project_bev(cloud, pc.bev, empty_label=empty)
            out = os.path.join(args.out, f"{stem}.bev.gfvw")
            write_view_image(out, img.features, img.representative_index)
            if img.labels is not None:
                write_view_image(
                    os.path.join(args.out, f"{stem}.bev_labels.gfvw"),
                    img.labels[..., None].astype("<i4"),
                    img.representative_index,
                )
            occ = float((img.representative_index >= 0).mean())
            lines.append(f"scan={scan_path} view=bev occupancy={occ:.4f}")
            if args.plot:
                _plot_bev_image(img, os.path.join(args.out, f"{stem}.bev.png"))
        return lines

    labels = args.labels or [None] * len(args.scans)
    failures = 0
    for result in _fan_out(list(zip(args.scans, labels)), _catching(one), args.jobs):
        if isinstance(result, Exception):
            print(f"error: {result}", file=sys.stderr)
            failures += 1
        else:
            for line in result:
                print(line)
    return 1 if failures else 0


def _catching(fn):
    def wrapped(item):
        try:
            return fn(item)
        except Exception as e:  # per-file isolation; summarized by the caller
            return e

    return wrapped


def cmd_flow(args) -> int:
    _require_readable([args.scan])
    cfg, pc = _pipeline_config(args)
    cloud = load_scan(args.scan)
    maps = make_maps(pc, args.seed)
    if args.zero_attention:
        params = make_params(pc, args.seed, zero_attention=True)
    elif args.params:
        p = load_attention_params(args.params)
        if p.c_target != pc.channels or p.c_in != 2 * pc.channels:
            raise ConfigError(
                f"parameter file fuses {p.c_in} -> {p.c_target} channels, "
                f"pipeline runs {pc.channels}"
            )
        params = [(p, p) for _ in pc.scales]
    else:
        params = make_params(pc, args.seed)
    result = run_pipeline(cloud, pc, maps=maps, params=params, jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    for i, (fr, fb) in enumerate(result.fused):
        none_r = np.full(fr.shape[:2], -1, dtype="<i4")
        none_b = np.full(fb.shape[:2], -1, dtype="<i4")
        write_view_image(os.path.join(args.out, f"fused_rv_s{i}.gfvw"), fr, none_r)
        write_view_image(os.path.join(args.out, f"fused_bev_s{i}.gfvw"), fb, none_b)
    report = {
        "scan": args.scan,
        "scales": list(pc.scales),
        "channels": pc.channels,
        "stage_seconds": {k: round(v, 6) for k, v in result.stage_seconds.items()},
        "outputs": sorted(os.listdir(args.out)),
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_refine(args) -> int:
    _require_readable([args.scan, args.rv_scores, args.bev_scores])
    cloud = load_scan(args.scan)
    f_r = read_blocks(args.rv_scores)["scores"].astype(np.float64)
    f_b = read_blocks(args.bev_scores)["scores"].astype(np.float64)
    if len(f_r) != len(cloud) or len(f_b) != len(cloud):
        raise ProcessingError(
            f"score rows ({len(f_r)}, {len(f_b)}) do not match {len(cloud)} points in {args.scan}"
        )
    if args.method == "kpconv":
        if args.params:
            kp = load_kpconv_params(args.params)
        else:
            kp = KpconvParams.random(
                f_r.shape[1] + f_b.shape[1],
                f_r.shape[1],
                num_points=args.k,
                radius=args.radius,
                sigma=args.sigma,
                seed=args.seed,
            )
        labels = argmax_labels(fuse_predictions(f_r, f_b, cloud, kp))
    else:
        base = argmax_labels((f_r + f_b) / 2.0)
        labels = knn_postprocess(cloud, base, cloud.ranges(), k=args.k, cutoff=args.cutoff)
    with open(args.out, "wb") as f:
        f.write(write_labels(labels))
    print(f"method={args.method} points={len(labels)} out={args.out}")
    return 0


def cmd_eval(args) -> int:
    if len(args.pred) != len(args.gt):
        raise ConfigError(f"{len(args.pred)} prediction files vs {len(args.gt)} ground-truth files")
    if args.scores and len(args.scores) != len(args.gt):
        raise ConfigError(f"{len(args.scores)} score files vs {len(args.gt)} ground-truth files")
    _require_readable(args.pred + args.gt + (args.scores or []))
    cmap = _load_classmap(args.classmap)
    identity = ClassMap.identity(cmap.num_classes, cmap.ignore_id)
    pred_map = cmap if args.remap == "both" else identity
    gt_map = cmap if args.remap in ("gt", "both") else identity
    score_files = args.scores or [None] * len(args.gt)

    def one(triple):
        pred_path, gt_path, score_path = triple
        pred = load_labels(pred_path, pred_map)
        gt = load_labels(gt_path, gt_map)
        if len(pred) != len(gt):
            raise PairingError(
                f"{pred_path}: {len(pred)} predictions vs {len(gt)} labels in {gt_path}"
            )
        cm = ConfusionMatrix(cmap.num_classes, cmap.ignore_id)
        cm.accumulate(pred, gt)
        terms = None
        if score_path:
            scores = read_blocks(score_path)["scores"]
            if len(scores) != len(gt):
                raise PairingError(
                    f"{score_path}: {len(scores)} score rows vs {len(gt)} labels in {gt_path}"
                )
            ce = cross_entropy(scores, gt, cmap.ignore_id)
            ls = lovasz_softmax(scores, gt, cmap.ignore_id)
            terms = {"ce": ce, "lovasz": ls, "cl": ce + ls}
        return cm, terms

    results = _fan_out(list(zip(args.pred, args.gt, score_files)), _catching(one), args.jobs)
    failures = [r for r in results if isinstance(r, Exception)]
    for e in failures:
        print(f"error: {e}", file=sys.stderr)
    if failures:
        return 1
    total = ConfusionMatrix(cmap.num_classes, cmap.ignore_id)
    for cm, _ in results:
        total.merge(cm)
    per_class, mean_iou = miou(total)
    report = {
        "scans": len(args.pred),
        "points": total.total,
        "per_class_iou": [None if np.isnan(v) else round(float(v), 6) for v in per_class],
        "miou": round(mean_iou, 6),
        "accuracy": round(accuracy(total), 6),
        "fwiou": round(fwiou(total), 6),
    }
    if args.scores:
        loss_terms = [terms for _, terms in results]
        report["losses"] = {
            "per_scan": [{k: round(v, 9) for k, v in t.items()} for t in loss_terms],
            "mean_ce": round(float(np.mean([t["ce"] for t in loss_terms])), 9),
            "mean_lovasz": round(float(np.mean([t["lovasz"] for t in loss_terms])), 9),
            "mean_cl": round(float(np.mean([t["cl"] for t in loss_terms])), 9),
        }
    _json_out(report, args.out)
    if args.plot:
        _plot_confusion(total, args.plot)
    return 0


def cmd_loss(args) -> int:
    _require_readable(
        [args.gt, args.fused, args.rv, args.bev, args.img_rv, args.img_rv_labels, args.img_bev, args.img_bev_labels]
    )
    cmap = _load_classmap(args.classmap)
    identity = ClassMap.identity(cmap.num_classes, cmap.ignore_id)
    gt = load_labels(args.gt, identity)
    pt = {name: read_blocks(getattr(args, name))["scores"] for name in ("fused", "rv", "bev")}
    img_rv, _ = read_view_image(args.img_rv)
    img_rv_labels, _ = read_view_image(args.img_rv_labels)
    img_bev, _ = read_view_image(args.img_bev)
    img_bev_labels, _ = read_view_image(args.img_bev_labels)
    weights = LossWeights.from_string(args.loss_weights)
    total, terms = loss_total(
        img_rv,
        img_rv_labels[..., 0],
        img_bev,
        img_bev_labels[..., 0],
        pt["rv"],
        pt["bev"],
        pt["fused"],
        gt,
        weights,
        cmap.ignore_id,
    )
    _json_out({k: round(v, 9) for k, v in terms.items()}, args.out)
    return 0


def cmd_bench(args) -> int:
    cfg, pc = _pipeline_config(args)
    sc = cfgmod.synth_config(cfg, dropout=args.dropout)
    cloud = synth_scan(sc, args.seed)
    maps = make_maps(pc, args.seed)
    params = make_params(pc, args.seed)
    head = make_head_params(pc, args.seed)

    per_stage: dict[str, list[float]] = {}
    core_walls = []
    for rep in range(args.warmup + args.repeats):
        result = run_pipeline(
            cloud,
            pc,
            maps=maps,
            params=params,
            jobs=args.jobs,
            head_params=head,
            head_points=args.head_points,
        )
        if rep < args.warmup:
            continue
        core_walls.append(result.core_wall_seconds)
        for name, sec in result.stage_seconds.items():
            per_stage.setdefault(name, []).append(sec)

    def stats(samples):
        ms = np.asarray(samples) * 1e3
        return {"median_ms": round(float(np.percentile(ms, 50)), 3),
                "p95_ms": round(float(np.percentile(ms, 95)), 3),
                "runs": len(samples)}

    report = {
        "points": len(cloud),
        "channels": pc.channels,
        "kernel_size": pc.kernel_size,
        "scales": list(pc.scales),
        "jobs": args.jobs,
        "head_points": args.head_points,
        "cpu_count": os.cpu_count(),
        "stages": {name: stats(samples) for name, samples in sorted(per_stage.items())},
        "core_pipeline": stats(core_walls),
    }
    _json_out(report, args.out)
    return 0


def _plot_range_image(img, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    r = img.features[..., 3]
    masked = np.ma.masked_where(img.point_index < 0, r)
    fig, ax = plt.subplots(figsize=(14, 2.2))
    ax.imshow(masked, aspect="auto", cmap="viridis", interpolation="nearest")
    ax.set_title("range (m)")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def _plot_bev_image(img, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    z = img.features[..., 5]
    masked = np.ma.masked_where(img.representative_index < 0, z)
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(masked, cmap="viridis", interpolation="nearest")
    ax.set_title("top z (m) over polar grid")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def _plot_confusion(cm, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    counts = cm.counts.astype(np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    norm = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    fig, ax = plt.subplots(figsize=(7, 6))
    im = ax.imshow(norm, cmap="magma", vmin=0, vmax=1)
    ax.set_xlabel("prediction")
    ax.set_ylabel("ground truth")
    fig.colorbar(im)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossview", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--preset", choices=sorted(cfgmod.PRESETS), default="semantickitti")
        p.add_argument("--config", help="JSON config file with preset inheritance")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1, help="worker pool size")

    p = sub.add_parser("synth", help="emit a synthetic scan (and labels)")
    add_common(p)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--order", choices=["ring_major", "azimuth_major"], default="ring_major")
    p.add_argument("--layout", choices=["blocks", "uniform"], default="blocks")
    p.add_argument("--out", required=True)
    p.add_argument("--labels-out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("project", help="project scans to view images")
    add_common(p)
    p.add_argument("scans", nargs="+")
    p.add_argument("--labels", nargs="*", help="label files paired with the scans")
    p.add_argument("--view", choices=["rv", "bev", "both"], default="both")
    p.add_argument("--variant", choices=["original", "scanunfold"], default=None)
    p.add_argument("--classmap", default="semantickitti")
    p.add_argument("--remap", choices=["none", "raw"], default="none",
                   help="apply the classmap's raw->train mapping to the label files")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action="store_true", help="also write PNG renderings")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("flow", help="align and fuse seeded feature maps at pyramid scales")
    add_common(p)
    p.add_argument("scan")
    p.add_argument("--params", help="attention parameter file (applied to all scales)")
    p.add_argument("--zero-attention", action="store_true")
    p.add_argument("--scales", default=None, help="comma-separated fractions, e.g. 1,0.5,0.25,0.125")
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--kernel-size", dest="kernel_size", type=int, default=None)
    p.add_argument("--attention", choices=["softmax", "sigmoid"], default=None)
    p.add_argument("--variant", choices=["original", "scanunfold"], default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("refine", help="fuse per-point scores (kpconv head) or smooth labels (knn)")
    add_common(p)
    p.add_argument("--scan", required=True)
    p.add_argument("--rv-scores", dest="rv_scores", required=True)
    p.add_argument("--bev-scores", dest="bev_scores", required=True)
    p.add_argument("--method", choices=["kpconv", "knn"], default="kpconv")
    p.add_argument("--params", help="kpconv parameter file")
    p.add_argument("--k", type=int, default=15, help="kernel points (kpconv) or neighbors (knn)")
    p.add_argument("--radius", type=float, default=0.60)
    p.add_argument("--sigma", type=float, default=0.30)
    p.add_argument("--cutoff", type=float, default=1.0, help="range gate for knn smoothing (m)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="confusion-matrix metrics over label files")
    add_common(p)
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--scores", nargs="*", help="per-point score files; adds per-term losses")
    p.add_argument("--classmap", default="semantickitti")
    p.add_argument("--remap", choices=["none", "gt", "both"], default="none",
                   help="apply the classmap's raw->train mapping to these inputs")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("--plot", help="write a confusion heatmap PNG")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loss", help="composite loss breakdown from score files")
    add_common(p)
    p.add_argument("--gt", required=True)
    p.add_argument("--fused", required=True)
    p.add_argument("--rv", required=True)
    p.add_argument("--bev", required=True)
    p.add_argument("--img-rv", dest="img_rv", required=True)
    p.add_argument("--img-rv-labels", dest="img_rv_labels", required=True)
    p.add_argument("--img-bev", dest="img_bev", required=True)
    p.add_argument("--img-bev-labels", dest="img_bev_labels", required=True)
    p.add_argument("--lambda", dest="loss_weights", default="2,2,2,1,1")
    p.add_argument("--classmap", default="semantickitti")
    p.add_argument("--out")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("bench", help="pipeline throughput on a synthetic scan")
    add_common(p)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--scales", default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--kernel-size", dest="kernel_size", type=int, default=None)
    p.add_argument("--variant", choices=["original", "scanunfold"], default=None)
    p.add_argument("--head-points", dest="head_points", type=int, default=20000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: no such file: {e.args[0] if e.args else e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (MalformedScanError, PairingError, FormatError, ProcessingError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
