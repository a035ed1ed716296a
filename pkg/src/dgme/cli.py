"""Command-line pipeline: synth -> extract -> stats -> split -> train -> eval.

Every artifact embeds {version, seed, config_hash} metadata in a header
comment or JSON field, and the whole pipeline is byte-reproducible given
one seed. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
failure. Errors print a single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import multiprocessing
import sys
from pathlib import Path

import numpy as np

import dgme
from dgme import descriptor as dsc
from dgme import evaluation as ev
from dgme import model as mdl
from dgme import synth, viz
from dgme.errors import DataError, DgmeError, NumericError, UsageError
from dgme.flow import FarnebackConfig
from dgme.videoio import SamplingSpec, load_clip, read_y8seq


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_flow_flags(p: argparse.ArgumentParser) -> None:
    d = FarnebackConfig()
    p.add_argument("--flow-levels", type=int, default=d.pyramid_levels)
    p.add_argument("--flow-scale", type=float, default=d.pyramid_scale)
    p.add_argument("--flow-window", type=int, default=d.window_size)
    p.add_argument("--flow-iterations", type=int, default=d.iterations)
    p.add_argument("--flow-poly-n", type=int, default=d.poly_n)
    p.add_argument("--flow-poly-sigma", type=float, default=d.poly_sigma)


def _flow_cfg(args) -> FarnebackConfig:
    return FarnebackConfig(
        pyramid_levels=args.flow_levels,
        pyramid_scale=args.flow_scale,
        window_size=args.flow_window,
        iterations=args.flow_iterations,
        poly_n=args.flow_poly_n,
        poly_sigma=args.flow_poly_sigma,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dgme", description=__doc__)
    parser.add_argument("--version", action="version", version=f"dgme {dgme.__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    p.add_argument("--classes", required=True,
                   help="comma-separated class names (static,tilt,pan,zoom,track)")
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--domain", choices=("modern", "historical"), default="modern")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--mag-min", type=float, default=1.0)
    p.add_argument("--mag-max", type=float, default=4.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="compute motion descriptors for a corpus")
    p.add_argument("--ann", required=True, help="annotations.csv of the corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--mthr", type=float, default=0.5)
    p.add_argument("--bins", type=int, default=12)
    p.add_argument("--grid", type=int, default=3)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--frames-per-clip", type=int, default=12)
    p.add_argument("--interval", type=int, default=6)
    p.add_argument("--target-size", type=int, default=224)
    p.add_argument("--seed", type=int, default=0, help="recorded in artifact metadata")
    _add_flow_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("stats", help="fit per-dimension calibration statistics")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("normalize", help="apply calibration statistics to features")
    p.add_argument("--features", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("split", help="stratified train/val/test split of annotations")
    p.add_argument("--ann", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ratios", default="0.6,0.2,0.2")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("oversample", help="oversample training annotations per class")
    p.add_argument("--split", required=True, help="training split CSV")
    p.add_argument("--schema", required=True)
    p.add_argument("--targets", required=True, help="class=count,class=count,...")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oversample)

    p = sub.add_parser("train", help="train a classification head on features")
    p.add_argument("--features", required=True)
    p.add_argument("--train", dest="train_split", required=True)
    p.add_argument("--val", dest="val_split", required=True)
    p.add_argument("--mode", choices=("dgme-only", "fusion"), default="dgme-only")
    p.add_argument("--stats", default=None, help="calibration statistics JSON")
    p.add_argument("--clips", default=None, help="corpus dir (needed for fusion embeddings)")
    p.add_argument("--schema", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr-max", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--embed-dim", type=int, default=64)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predictions or a model on a split")
    p.add_argument("--split", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--features", default=None)
    p.add_argument("--stats", default=None)
    p.add_argument("--clips", default=None)
    p.add_argument("--predictions", default=None, help="score an existing predictions CSV")
    p.add_argument("--out-metrics", required=True)
    p.add_argument("--out-confusion", required=True)
    p.add_argument("--out-predictions", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="render descriptor visualizations as SVG")
    p.add_argument("kind", choices=("rose", "grid"))
    p.add_argument("--features", required=True)
    p.add_argument("--label", default=None, help="rose: aggregate clips with this label")
    p.add_argument("--clip-id", default=None, help="grid: render this clip")
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=12)
    p.add_argument("--grid", dest="grid_cells", type=int, default=3)
    p.add_argument("--mthr", type=float, default=0.5)
    p.set_defaults(func=cmd_viz)

    return parser


def _base_meta(seed: int, cfg_hash: str | None = None) -> dict:
    meta = {"version": dgme.__version__, "seed": seed}
    if cfg_hash is not None:
        meta["config_hash"] = cfg_hash
    return meta


def cmd_synth(args) -> int:
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    if not classes:
        raise UsageError("no classes given")
    for c in classes:
        if c not in synth.CLASSES:
            raise UsageError(f"unknown class {c!r}, valid classes: {', '.join(synth.CLASSES)}")
    rows = synth.make_corpus(
        args.out, classes, args.per_class, args.domain, args.seed,
        size=args.size, frames=args.frames,
        magnitude_range=(args.mag_min, args.mag_max),
        meta={"version": dgme.__version__},
    )
    print(f"wrote {len(rows)} clips to {args.out}")
    return 0


# module-level worker so multiprocessing can pickle it
def _extract_one(task):
    index, clip_path, sampling, dcfg, fcfg = task
    seq = load_clip(clip_path, sampling)
    desc = dsc.compute_dgme(seq, dcfg, fcfg)
    return index, desc.values


def cmd_extract(args) -> int:
    ann_path = Path(args.ann)
    meta, rows = ev.read_annotations_csv(ann_path)
    root = ann_path.parent
    dcfg = dsc.DgmeConfig(grid=args.grid, directional_bins=args.bins,
                          magnitude_threshold=args.mthr)
    fcfg = _flow_cfg(args)
    sampling = SamplingSpec(frames_per_clip=args.frames_per_clip,
                            frame_interval=args.interval,
                            target_size=args.target_size)
    cfg_hash = dsc.config_hash(dcfg, fcfg)

    tasks = []
    for i, (rel, _) in enumerate(rows):
        clip_path = root / rel
        if not clip_path.exists():
            raise DataError(f"row {i + 1}: clip file missing: {clip_path}")
        tasks.append((i, str(clip_path), sampling, dcfg, fcfg))

    if args.jobs <= 1:
        results = [_extract_one(t) for t in tasks]
    else:
        with multiprocessing.Pool(args.jobs) as pool:
            results = pool.map(_extract_one, tasks, chunksize=8)
    results.sort(key=lambda r: r[0])

    descriptors = [
        dsc.DgmeDescriptor(values, clip_id=Path(rows[i][0]).stem, config_hash=cfg_hash)
        for i, values in results
    ]
    labels = [label for _, label in rows]
    out_meta = _base_meta(args.seed, cfg_hash)
    if "domain" in meta:
        out_meta["domain"] = meta["domain"]
    dsc.write_features_csv(args.out, descriptors, labels, out_meta)
    print(f"wrote {len(descriptors)} descriptors to {args.out}")
    return 0


def cmd_stats(args) -> int:
    meta, clip_ids, _, matrix = dsc.read_features_csv(args.features)
    cfg_hash = meta.get("config_hash", "")
    if matrix.shape[0] < 2:
        raise DataError(f"need >= 2 feature rows to fit statistics, have {matrix.shape[0]}")
    descs = [dsc.DgmeDescriptor(matrix[i], clip_ids[i], cfg_hash) for i in range(len(clip_ids))]
    stats = dsc.fit_stats(descs)
    out_meta = _base_meta(args.seed, cfg_hash)
    if "domain" in meta:
        out_meta["domain"] = meta["domain"]
    dsc.write_stats_json(args.out, stats, out_meta)
    print(f"fitted statistics on {stats.source_count} descriptors -> {args.out}")
    return 0


def cmd_normalize(args) -> int:
    meta, clip_ids, labels, matrix = dsc.read_features_csv(args.features)
    if meta.get("calibrated") == "true":
        raise DataError(f"features {args.features} are already calibrated")
    stats, _ = dsc.read_stats_json(args.stats)
    cfg_hash = meta.get("config_hash", "")
    if cfg_hash != stats.config_hash:
        raise DataError(
            f"config hash mismatch: features {cfg_hash} vs stats {stats.config_hash}"
        )
    calibrated = [
        dsc.DgmeDescriptor(dsc.apply_zscore(matrix[i], stats), clip_ids[i], cfg_hash)
        for i in range(len(clip_ids))
    ]
    out_meta = _base_meta(int(meta.get("seed", 0)), cfg_hash)
    if "domain" in meta:
        out_meta["domain"] = meta["domain"]
    out_meta["calibrated"] = "true"
    dsc.write_features_csv(args.out, calibrated, labels, out_meta)
    print(f"calibrated {len(calibrated)} rows -> {args.out}")
    return 0


def _load_annotated(path, schema) -> tuple[dict, ev.AnnotatedSet]:
    meta, rows = ev.read_annotations_csv(path)
    raw = [(Path(p).stem, label) for p, label in rows]
    return meta, ev.remap_labels(raw, schema)


def cmd_split(args) -> int:
    schema = ev.load_schema(args.schema)
    meta, rows = ev.read_annotations_csv(args.ann)
    aset = ev.remap_labels([(p, label) for p, label in rows], schema)
    try:
        ratios = tuple(float(x) for x in args.ratios.split(","))
    except ValueError as exc:
        raise UsageError(f"bad --ratios: {exc}") from exc
    train, val, test = ev.stratified_split(aset, ratios, seed=args.seed)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_meta = _base_meta(args.seed)
    out_meta["schema"] = schema.name
    if "domain" in meta:
        out_meta["domain"] = meta["domain"]
    for name, part in (("train", train), ("val", val), ("test", test)):
        ev.write_annotations_csv(out_dir / f"{name}.csv", part.entries, out_meta)
    counts = {name: len(part.entries) for name, part in
              (("train", train), ("val", val), ("test", test))}
    print(f"split {len(aset.entries)} entries -> {counts}")
    return 0


def cmd_oversample(args) -> int:
    schema = ev.load_schema(args.schema)
    meta, aset = _load_annotated(args.split, schema)
    targets = {}
    try:
        for part in args.targets.split(","):
            cls, count = part.split("=")
            targets[cls.strip()] = int(count)
    except ValueError as exc:
        raise UsageError(f"bad --targets: {exc}") from exc
    for cls in targets:
        if cls not in schema.classes:
            raise UsageError(f"target class {cls!r} not in schema {schema.name}")
    result = ev.oversample(aset, targets, seed=args.seed)
    out_meta = _base_meta(args.seed)
    out_meta["schema"] = schema.name
    if "domain" in meta:
        out_meta["domain"] = meta["domain"]
    ev.write_annotations_csv(args.out, result.entries, out_meta)
    print(f"oversampled {len(aset.entries)} -> {len(result.entries)} entries")
    return 0


def _join_features(features_path, split_path, schema, stats_path):
    """Join a split's clip ids against a features table.

    Returns (features meta, clip_ids, X matrix, y indices, calibrated flag).
    """
    meta, clip_ids, _, matrix = dsc.read_features_csv(features_path)
    already = meta.get("calibrated") == "true"
    if stats_path is not None:
        if already:
            raise DataError("features are already calibrated, refusing to calibrate again")
        stats, _ = dsc.read_stats_json(stats_path)
        if meta.get("config_hash", "") != stats.config_hash:
            raise DataError(
                f"config hash mismatch: features {meta.get('config_hash', '')} "
                f"vs stats {stats.config_hash}"
            )
        matrix = np.stack([dsc.apply_zscore(matrix[i], stats) for i in range(matrix.shape[0])])
    index = {cid: i for i, cid in enumerate(clip_ids)}

    _, annotated = _load_annotated(split_path, schema)
    ids, ys = [], []
    for cid, label in annotated.entries:
        if cid not in index:
            raise DataError(f"clip {cid} from {split_path} missing in features {features_path}")
        ids.append(cid)
        ys.append(schema.index(label))
    X = matrix[[index[c] for c in ids]]
    return meta, ids, X, np.array(ys, dtype=np.int64), already or stats_path is not None


def _embed_clips(clips_dir, clip_ids, seed, dim):
    provider = mdl.StubEmbeddingProvider(seed=seed, dim=dim)
    root = Path(clips_dir)
    rows = []
    for cid in clip_ids:
        path = root / f"{cid}.y8seq"
        if not path.is_file():
            raise DataError(f"clip file for embedding not found: {path}")
        rows.append(provider.embed(read_y8seq(path)))
    return np.stack(rows), provider


def cmd_train(args) -> int:
    schema = ev.load_schema(args.schema)
    mode = "dgme_only" if args.mode == "dgme-only" else "fusion"
    if mode == "fusion" and args.stats is None:
        print("warning: fusion without calibration statistics; cross-domain "
              "evaluation of this model will be refused", file=sys.stderr)
    if mode == "fusion" and args.clips is None:
        raise UsageError("--mode fusion requires --clips for backbone embeddings")

    meta, train_ids, x_train, y_train, calibrated = _join_features(
        args.features, args.train_split, schema, args.stats
    )
    _, val_ids, x_val, y_val, _ = _join_features(
        args.features, args.val_split, schema, args.stats
    )

    provider = None
    xb_train = xb_val = None
    if mode == "fusion":
        xb_train, provider = _embed_clips(args.clips, train_ids, args.seed, args.embed_dim)
        xb_val, _ = _embed_clips(args.clips, val_ids, args.seed, args.embed_dim)

    cfg = mdl.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr_max=args.lr_max,
        weight_decay=args.weight_decay, early_stop_patience=args.patience,
        seed=args.seed,
    )
    train_set = mdl.LabeledFeatures(train_ids, x_train, y_train, list(schema.classes),
                                    backbone=xb_train)
    val_set = mdl.LabeledFeatures(val_ids, x_val, y_val, list(schema.classes),
                                  backbone=xb_val)
    params, log = mdl.train(mode, train_set, val_set, cfg)

    model_meta = _base_meta(args.seed, meta.get("config_hash", ""))
    model_meta.update(
        {
            "mode": mode,
            "schema": schema.name,
            "calibrated": calibrated,
            "stats_config_hash": meta.get("config_hash", "") if args.stats else None,
            "train_domain": meta.get("domain"),
            "embedding": provider.descriptor if provider else None,
            "embed_seed": args.seed if provider else None,
            "embed_dim": args.embed_dim if provider else None,
        }
    )
    mdl.save_model_json(args.out, params, model_meta)
    if args.log:
        mdl.write_training_log(args.log, log, _base_meta(args.seed, meta.get("config_hash", "")))
    best = max(row["val_macro_f1"] for row in log)
    print(f"trained {mode} head: best val macro F1 {best:.4f} over {len(log)} epochs -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    schema = ev.load_schema(args.schema)
    _, truth = _load_annotated(args.split, schema)

    if args.predictions is not None:
        _, rows = ev.read_annotations_csv(args.predictions)
        predictions = [(Path(p).stem, label) for p, label in rows]
        seed = args.seed
    else:
        if args.model is None or args.features is None:
            raise UsageError("eval needs either --predictions or both --model and --features")
        params, model_meta = mdl.load_model_json(args.model)
        feat_meta_raw, _, _, _ = dsc.read_features_csv(args.features)
        precalibrated = feat_meta_raw.get("calibrated") == "true"
        if model_meta.get("calibrated"):
            if args.stats is None and not precalibrated:
                raise DataError(
                    "model was trained on calibrated features; pass --stats "
                    "with the statistics used at training time"
                )
        elif args.stats is not None or precalibrated:
            raise DataError("model was trained uncalibrated; evaluate on raw features")
        feat_domain = feat_meta_raw.get("domain")
        train_domain = model_meta.get("train_domain")
        if (feat_domain and train_domain and feat_domain != train_domain
                and not model_meta.get("calibrated")):
            raise DataError(
                f"cross-domain evaluation ({train_domain} -> {feat_domain}) "
                "requires z-score calibration; train with --stats"
            )
        if model_meta.get("config_hash") and feat_meta_raw.get("config_hash") \
                and model_meta["config_hash"] != feat_meta_raw["config_hash"]:
            raise DataError(
                f"feature config hash {feat_meta_raw['config_hash']} does not match "
                f"the hash the model was trained with ({model_meta['config_hash']})"
            )

        _, ids, X, y, _ = _join_features(args.features, args.split, schema, args.stats)
        backbone = None
        if model_meta.get("mode") == "fusion":
            if args.clips is None:
                raise UsageError("evaluating a fusion model requires --clips")
            backbone, _ = _embed_clips(
                args.clips, ids, int(model_meta.get("embed_seed", 0)),
                int(model_meta.get("embed_dim", 64)),
            )
        feats = mdl.LabeledFeatures(ids, X, y, list(schema.classes), backbone=backbone)
        pred_idx = mdl.predict(feats, params)
        predictions = [(cid, schema.classes[k]) for cid, k in zip(ids, pred_idx)]
        seed = int(model_meta.get("seed", args.seed))
        if args.out_predictions:
            ev.write_annotations_csv(args.out_predictions, predictions, _base_meta(seed))

    cm, report = ev.evaluate(predictions, truth)
    out_meta = _base_meta(seed)
    out_meta["schema"] = schema.name
    ev.write_metrics_json(args.out_metrics, report, schema.classes, out_meta)
    ev.write_confusion_csv(args.out_confusion, cm, out_meta)
    print(f"accuracy {report.accuracy:.4f}, macro F1 {report.macro_f1:.4f} "
          f"({cm.total} clips) -> {args.out_metrics}")
    return 0


def cmd_viz(args) -> int:
    meta, clip_ids, labels, matrix = dsc.read_features_csv(args.features)
    cfg = dsc.DgmeConfig(grid=args.grid_cells, directional_bins=args.bins,
                         magnitude_threshold=args.mthr)
    svg_meta = {"version": dgme.__version__, "seed": meta.get("seed", 0)}
    if "config_hash" in meta:
        svg_meta["config_hash"] = meta["config_hash"]

    if args.kind == "rose":
        if args.label is None:
            raise UsageError("viz rose requires --label")
        rows = matrix[[i for i, lab in enumerate(labels) if lab == args.label]]
        if rows.shape[0] == 0:
            raise DataError(f"no clips with label {args.label!r} in {args.features}")
        directional, _ = viz.aggregate_bins(rows, cfg)
        svg = viz.rose_svg(directional, meta=svg_meta)
    else:
        if args.clip_id is None:
            raise UsageError("viz grid requires --clip-id")
        try:
            row = matrix[clip_ids.index(args.clip_id)]
        except ValueError as exc:
            raise DataError(f"clip id {args.clip_id!r} not found in {args.features}") from exc
        svg = viz.grid_svg(row, cfg, meta=svg_meta)

    with open(args.out, "w", newline="\n") as fh:
        fh.write(svg)
    print(f"wrote {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"error: {exc}".replace("\n", " "), file=sys.stderr)
        return 3
    except DgmeError as exc:
        print(f"error: {exc}".replace("\n", " "), file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
