"""Thin command-line wrapper around the library."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import alignment, harness, imaging, protocol, sampling, service, stats
from .data import (Catalog, TIER_NAMES, compute_mos, load_catalog, load_ratings,
                   make_tier_set, save_catalog, save_mos_table)
from .model import (ModelConfig, TrainConfig, TrainSample, init_params, load_params,
                    predict, save_params, train_two_stage)

NORMFAV_RANGE = (0.0, 1.5)
LEGACY_BIN_COUNT = 10


def _parse_geometry(text: str) -> tuple[int, int]:
    w, _, h = text.partition("x")
    return int(w), int(h)


def _cmd_sample(args) -> int:
    catalog = load_catalog(args.catalog)
    min_w, min_h = _parse_geometry(args.min_size)
    pool = [r for r in catalog.records if sampling.admissible(r, min_w, min_h)]
    if not pool:
        print("no admissible images in the catalog", file=sys.stderr)
        return 1
    # discretize continuous metadata so it joins the stratified attributes
    for r in pool:
        mos = r.legacy_mos_rescaled()
        if mos is not None:
            level = sampling.quantize_equal_bins([mos], LEGACY_BIN_COUNT)[0]
            r.attributes = {**r.attributes, "legacy_mos_bin": str(level)}
        if r.views > 0 or r.favorites > 0:
            nf = sampling.normalized_favorites(r.favorites, r.views)
            level = sampling.quantize_equal_bins([nf], LEGACY_BIN_COUNT, NORMFAV_RANGE)[0]
            r.attributes = {**r.attributes, "normfav_bin": str(level)}
    space = sampling.AttributeSpace.from_pool(pool)
    ids = sampling.stratified_sample(pool, space, n=args.n, seed=args.seed)
    chosen = set(ids)
    out = Catalog(records=[r for r in catalog.records if r.id in chosen],
                  extra_columns=catalog.extra_columns)
    save_catalog(out, args.out)
    print(f"sampled {len(ids)} of {len(pool)} admissible images -> {args.out}")
    return 0


def _cmd_prepare(args) -> int:
    catalog = load_catalog(getattr(args, "in"))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tiers = make_tier_set(*_parse_geometry(args.tier_base))
    images_dir = Path(args.images_dir)
    for rec in catalog.records:
        src = next((p for ext in (".png", ".jpg", ".jpeg")
                    for p in [images_dir / f"{rec.id}{ext}"] if p.exists()), None)
        if src is None:
            print(f"missing source image for {rec.id}", file=sys.stderr)
            return 1
        raster = imaging.load_raster(src)
        pyramid = imaging.build_pyramid(imaging.crop_to_4_3(raster), tiers)
        for name, tier_raster in pyramid.tiers.items():
            imaging.save_raster_png(tier_raster, out_dir / f"{rec.id}_{name}.png")
    print(f"prepared {len(catalog.records)} pyramids -> {out_dir}")
    return 0


def _cmd_analyze(args) -> int:
    events = load_ratings(args.ratings)
    table = compute_mos(events)
    out_path = Path(args.out)
    report: dict = {"n_events": len(events), "n_rows": len(table.rows)}
    try:
        fit = stats.sos_fit(table, seed=args.seed)
        report["sos"] = {"a": fit.a, "ci95": list(fit.ci95), "n_images": fit.n_images}
    except ValueError as err:
        report["sos"] = {"error": str(err)}
    panel: dict[tuple[str, str], dict[str, list[float]]] = {}
    for ev in events:
        panel.setdefault((ev.image_id, ev.tier), {}).setdefault(
            ev.participant_id, []).append(ev.value)
    groups = [[sum(v) / len(v) for v in by_p.values()] for by_p in panel.values()]
    try:
        icc = stats.icc_1_1(groups)
        report["icc"] = {"icc": icc.icc, "msb": icc.msb, "msw": icc.msw, "k0": icc.k0}
    except ValueError as err:
        report["icc"] = {"error": str(err)}
    report["inter_rater_srcc"] = {}
    for tier in table.tiers():
        res = stats.inter_rater_srcc(events, tier)
        report["inter_rater_srcc"][tier] = {"values": res.values, "median": res.median}
    if len(table.tiers()) >= 2:
        report["label_shift"] = stats.label_shift_report(table)
    out_path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    save_mos_table(table, out_path.with_suffix(".mos.csv"))
    _write_plot_csvs(report, table, out_path)
    print(f"analysis -> {out_path}")
    return 0


def _write_plot_csvs(report: dict, table, out_path: Path) -> None:
    # variance-vs-MOS points for the SOS plot
    lines = ["image_id,tier,mos,var,n"]
    lines += [f"{r.image_id},{r.tier},{r.mos!r},{r.var!r},{r.n}" for r in table.rows]
    out_path.with_suffix(".sos_points.csv").write_text("\n".join(lines) + "\n")
    if "label_shift" in report:
        lines = ["tier,bin_lo,bin_hi,count"]
        for tier, hist in report["label_shift"]["histograms"].items():
            edges, counts = hist["edges"], hist["counts"]
            lines += [f"{tier},{edges[i]!r},{edges[i + 1]!r},{counts[i]}"
                      for i in range(len(counts))]
        out_path.with_suffix(".mos_hist.csv").write_text("\n".join(lines) + "\n")
    lines = ["tier,participant_a,participant_b,srcc"]
    for tier, block in report.get("inter_rater_srcc", {}).items():
        lines += [f"{tier},,,{v!r}" for v in block["values"]]
    out_path.with_suffix(".inter_rater.csv").write_text("\n".join(lines) + "\n")


def _cmd_remap(args) -> int:
    rows = Path(args.pairs).read_text(encoding="utf-8").splitlines()
    if not rows or rows[0] != "legacy,target":
        print("pairs file must start with 'legacy,target'", file=sys.stderr)
        return 1
    pairs = [tuple(map(float, line.split(","))) for line in rows[1:] if line]
    qmap = alignment.fit_quadratic(pairs, tier=args.tier, holdout=args.holdout,
                                   seed=args.seed)
    qmap.to_json(args.out)
    print(f"fit m(s) = {qmap.c0:.6g} + {qmap.c1:.6g} s + {qmap.c2:.6g} s^2; "
          f"holdout MAE gain {qmap.holdout_mae_gain:.1%}, "
          f"MSE gain {qmap.holdout_mse_gain:.1%} -> {args.out}")
    return 0


def _load_sample_csv(path: str, base: tuple[int, int]) -> list[TrainSample]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()
    if not rows or rows[0] != "image_id,path,tier,mos":
        raise ValueError("dataset csv must start with 'image_id,path,tier,mos'")
    samples = []
    for line in rows[1:]:
        if not line:
            continue
        image_id, img_path, tier, mos = line.split(",")
        raster = imaging.load_raster(img_path)
        low = raster if raster.geometry == base else \
            imaging.lanczos_resample(raster, *base)
        samples.append(TrainSample(
            low=np.ascontiguousarray(low.samples.transpose(2, 0, 1)),
            high=np.ascontiguousarray(raster.samples.transpose(2, 0, 1)),
            target=float(mos), image_id=image_id, tier=tier))
    return samples


def _cmd_train(args) -> int:
    cfg_json = json.loads(Path(args.config).read_text(encoding="utf-8"))
    model_cfg = ModelConfig(**cfg_json.get("model", {}))
    train_cfg = TrainConfig(**cfg_json.get("train", {}))
    train_set = _load_sample_csv(args.data, model_cfg.tier_base)
    val_set = _load_sample_csv(args.val, model_cfg.tier_base)
    params = init_params(model_cfg, seed=train_cfg.seed)
    params, history = train_two_stage(params, train_set, val_set, train_cfg)
    save_params(params, args.out)
    best = min(h["val_mse"] for h in history)
    print(f"trained {len(history)} epochs over two stages; "
          f"best val MSE {best:.4f} -> {args.out}")
    return 0


def _cmd_predict(args) -> int:
    params = load_params(args.model)
    raster = imaging.load_raster(args.image)
    geoms = params.config.tier_geometries()
    if args.tier not in geoms:
        print(f"unknown tier {args.tier}; expected one of {list(geoms)}", file=sys.stderr)
        return 1
    if raster.geometry != geoms[args.tier]:
        print(f"image is {raster.geometry}, tier {args.tier} expects {geoms[args.tier]}",
              file=sys.stderr)
        return 1
    if params.config.in_channels == 1 and raster.channels == 3:
        raster = imaging.to_grayscale(raster)
    score = predict(params, raster)
    print(f"{score:.3f}")
    return 0


def _cmd_eval(args) -> int:
    params = load_params(args.model)
    rows = Path(args.data).read_text(encoding="utf-8").splitlines()
    if not rows or rows[0] != "image_id,path,tier,mos,source":
        print("eval csv must start with 'image_id,path,tier,mos,source'", file=sys.stderr)
        return 1
    items = []
    for line in rows[1:]:
        if not line:
            continue
        image_id, img_path, tier, mos, source = line.split(",")
        raster = imaging.load_raster(img_path)
        if params.config.in_channels == 1 and raster.channels == 3:
            raster = imaging.to_grayscale(raster)
        items.append(harness.EvalItem(image_id=image_id, source=source, tier=tier,
                                      raster=raster, mos=float(mos)))
    report = harness.evaluate(harness.ModelPredictor(params), items,
                              model_name=Path(args.model).stem)
    report.to_json(args.out)
    print(f"joint RMSE {report.joint_rmse:.4f}, joint SRCC {report.joint_srcc} -> {args.out}")
    return 0


def _cmd_compare(args) -> int:
    reports = [harness.EvalReport.from_json(p) for p in args.reports]
    comparison = harness.compare_models(reports)
    harness.comparison_csv(comparison, args.out)
    print(json.dumps(comparison["table"], indent=2))
    return 0


def _cmd_serve(args) -> int:
    import os
    if args.data_dir:
        os.environ["KONX_DATA_DIR"] = args.data_dir
    if args.bind:
        os.environ["KONX_BIND_ADDR"] = args.bind
    study, httpd = service.server_from_env()
    host, port = httpd.server_address[:2]
    print(f"study service listening on {host}:{port}")
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="xriqa")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="stratified study-image selection")
    p.add_argument("--catalog", required=True)
    p.add_argument("--n", type=int, default=210)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-size", default="2048x1536")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("prepare", help="crop to 4:3 and build tier pyramids")
    p.add_argument("--in", dest="in", required=True)
    p.add_argument("--images-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--tier-base", default="512x384")
    p.set_defaults(fn=_cmd_prepare)

    p = sub.add_parser("analyze", help="reliability statistics + label-shift report")
    p.add_argument("--ratings", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_analyze)

    p = sub.add_parser("remap", help="fit a quadratic legacy-score map")
    p.add_argument("--pairs", required=True)
    p.add_argument("--tier", default="M", choices=list(TIER_NAMES))
    p.add_argument("--holdout", type=int, default=70)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_remap)

    p = sub.add_parser("train", help="two-stage training")
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("predict", help="score one image at a tier")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--tier", required=True)
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("eval", help="evaluate a model on a dataset csv")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("compare", help="rank evaluation reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_compare)

    p = sub.add_parser("serve", help="run the study service")
    p.add_argument("--data-dir")
    p.add_argument("--bind")
    p.set_defaults(fn=_cmd_serve)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
