"""Command-line pipeline: ingest, align, composite, smile, mine, dating.

Every run writes a run-manifest JSON (config snapshot, input hashes,
package version) into the output directory. Stages reuse cached upstream
artifacts when their recorded input hash still matches, else recompute.

Exit codes: 0 success, 2 config error, 3 data error, 4 infeasible
protocol, 5 internal error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, align, composite, corpus as corpus_mod, dating
from . import features, modeseek, smile
from .classify import load_model, save_model
from .config import ConfigError, PipelineConfig, describe_keys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INFEASIBLE = 4
EXIT_INTERNAL = 5


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _stage_hash(cfg, keys):
    h = hashlib.sha256()
    h.update(_sha256_file(cfg.get("data.manifest")).encode())
    h.update(_sha256_file(cfg.get("data.schema")).encode())
    for k in sorted(keys):
        h.update(f"{k}={cfg.get(k)!r};".encode())
    return h.hexdigest()


def _write_run_manifest(cfg, out_dir, subcommand):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config": cfg.snapshot(),
        "input_hashes": {
            "manifest": _sha256_file(cfg.get("data.manifest")),
            "schema": _sha256_file(cfg.get("data.schema")),
        },
    }
    path = os.path.join(out_dir, f"run_manifest_{subcommand}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _load_corpus(cfg):
    schema = corpus_mod.LandmarkSchema.from_json(cfg.get("data.schema"))
    c = corpus_mod.load_manifest(cfg.get("data.manifest"), schema)
    return corpus_mod.filter_frontal(c, yaw_max=float(cfg.get("data.yaw_max")),
                                     pitch_max=float(cfg.get("data.pitch_max")))


ALIGN_KEYS = ("data.yaw_max", "data.pitch_max", "align.canonical_width",
              "align.canonical_height", "align.max_iter", "align.tol")


def _mean_shape_and_cache(cfg, c, out_dir):
    """Compute or reuse the mean shape and the aligned-raster cache."""
    aligned_dir = os.path.join(out_dir, "aligned")
    stage_file = os.path.join(aligned_dir, "stage.json")
    shape_file = os.path.join(aligned_dir, "mean_shape.json")
    want = _stage_hash(cfg, ALIGN_KEYS)
    if os.path.isfile(stage_file):
        with open(stage_file, "r", encoding="utf-8") as fh:
            if json.load(fh).get("hash") == want:
                with open(shape_file, "r", encoding="utf-8") as fh2:
                    obj = json.load(fh2)
                mean_shape = align.MeanShape(
                    points=np.asarray(obj["points"]),
                    canonical_size=tuple(obj["canonical_size"]),
                    iterations_run=obj["iterations_run"],
                    final_delta=obj["final_delta"])
                return mean_shape, align.load_aligned_cache(c, aligned_dir)
    size = (int(cfg.get("align.canonical_width")),
            int(cfg.get("align.canonical_height")))
    mean_shape = align.compute_mean_shape(
        c, canonical_size=size, max_iter=int(cfg.get("align.max_iter")),
        tol=float(cfg.get("align.tol")))
    cache = align.write_aligned_cache(c, mean_shape, aligned_dir)
    with open(shape_file, "w", encoding="utf-8") as fh:
        json.dump({"points": mean_shape.points.tolist(),
                   "canonical_size": list(mean_shape.canonical_size),
                   "iterations_run": mean_shape.iterations_run,
                   "final_delta": mean_shape.final_delta},
                  fh, indent=2, sort_keys=True)
    with open(stage_file, "w", encoding="utf-8") as fh:
        json.dump({"hash": want}, fh)
    return mean_shape, cache


def _crops(cfg, c, mean_shape, cache):
    size = int(cfg.get("crop.size"))
    region = align.default_crop_region(
        mean_shape, bottom_band=int(cfg.get("crop.bottom_band")))
    return {p.id: align.crop_face_hair(cache[p.id], mean_shape,
                                       region=region, out_size=(size, size))
            for p in c}


def cmd_ingest(cfg, out_dir):
    c = _load_corpus(cfg)
    stats = corpus_mod.corpus_stats(c)
    os.makedirs(out_dir, exist_ok=True)
    corpus_mod.write_stats_csv(stats, os.path.join(out_dir, "stats.csv"))
    print(f"ingested {stats['n']} portraits "
          f"({stats['gender_pct']['female']:.1f}% female / "
          f"{stats['gender_pct']['male']:.1f}% male of known)")
    return EXIT_OK


def cmd_align(cfg, out_dir):
    c = _load_corpus(cfg)
    mean_shape, _ = _mean_shape_and_cache(cfg, c, out_dir)
    print(f"mean shape converged in {mean_shape.iterations_run} iterations "
          f"(delta {mean_shape.final_delta:.4g} px RMS)")
    return EXIT_OK


def cmd_composite(cfg, out_dir):
    c = _load_corpus(cfg)
    mean_shape, cache = _mean_shape_and_cache(cfg, c, out_dir)
    comps, report = composite.decade_composites(
        c, cache, min_count=int(cfg.get("composite.min_count")))
    composite.write_composites(comps, os.path.join(out_dir, "composites"))
    print(f"wrote {len(comps)} composites; "
          f"skipped {len(report['sparse_groups'])} sparse groups, "
          f"{report['skipped_unknown_gender']} unknown-gender portraits")
    return EXIT_OK


def _load_validation_pairs(path, schema):
    """Expression-intensity manifest: manifest rows with a 'level' key
    (0..5) alongside landmarks; images are not needed."""
    curvatures, levels = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            lm = np.asarray(rec["landmarks"], dtype=np.float64).reshape(-1, 2)
            if len(lm) != schema.point_count:
                raise corpus_mod.CorpusError(
                    f"{path}:{lineno}: landmark count mismatch")
            level = int(rec.get("level", rec.get("year")))
            curvatures.append(smile.lip_curvature(lm, schema))
            levels.append(level)
    return curvatures, levels


def cmd_smile(cfg, out_dir):
    c = _load_corpus(cfg)
    records = smile.smile_records(c)
    smile_dir = os.path.join(out_dir, "smile")
    os.makedirs(smile_dir, exist_ok=True)
    smile.write_records_csv(records, os.path.join(smile_dir, "records.csv"))
    rows, report = smile.smile_trend(c, records)
    smile.write_trend_csv(rows, os.path.join(smile_dir, "trend.csv"))
    if rows:
        smile.render_trend_svg(rows, os.path.join(smile_dir, "trend.svg"))
    exemplars = smile.exemplar_nearest_mean(
        c, records, bin_years=int(cfg.get("smile.bin_years")))
    with open(os.path.join(smile_dir, "exemplars.csv"), "w",
              encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "gender", "portrait_id"])
        for (b, g), pid in sorted(exemplars.items()):
            w.writerow([b, g, pid])
    val_path = cfg.get("smile.validation_manifest")
    if val_path:
        curvatures, levels = _load_validation_pairs(val_path, c.schema)
        vrows, corr, missing = smile.intensity_validation(curvatures, levels)
        smile.write_validation_csv(vrows,
                                   os.path.join(smile_dir, "validation.csv"))
        print(f"validation rank correlation {corr:.3f}"
              + (f" (missing levels {missing})" if missing else ""))
    print(f"smile: {len(rows)} trend rows, "
          f"{report['skipped_unknown_gender']} unknown-gender skipped")
    return EXIT_OK


def cmd_mine(cfg, out_dir, decade=None):
    decade = decade if decade is not None else cfg.get("mine.decade")
    if decade is None:
        raise ConfigError("mine requires --decade or mine.decade")
    decade = int(decade)
    c = _load_corpus(cfg)
    mean_shape, cache = _mean_shape_and_cache(cfg, c, out_dir)
    crops = _crops(cfg, c, mean_shape, cache)
    ids, matrix, _geometry = features.corpus_descriptors(
        crops, cell_px=int(cfg.get("hog.cell_px")),
        orientations=int(cfg.get("hog.orientations")))
    whitening = features.fit_whitening(matrix,
                                       shrinkage=cfg.get("whitening.shrinkage"))
    index = modeseek.DescriptorIndex(ids=tuple(ids), matrix=matrix)
    clusters = modeseek.mine_decade_styles(
        c, decade, whitening, index, crops,
        n_clusters=int(cfg.get("mine.n_clusters")),
        n_seeds=int(cfg.get("mine.n_seeds")),
        rounds=int(cfg.get("mine.rounds")),
        top_m=int(cfg.get("mine.top_m")),
        overlap_max=int(cfg.get("mine.overlap_max")),
        window=int(cfg.get("mine.window")),
        display_k=int(cfg.get("mine.display_k")),
        gender=cfg.get("mine.gender"),
        seed=cfg.seed("mine"))
    mine_dir = os.path.join(out_dir, "mine", str(decade))
    modeseek.write_cluster_report(clusters, c, crops, mine_dir)
    print(f"mined {len(clusters)} clusters for the {decade}s "
          f"(discriminativeness "
          f"{[cl.discriminativeness for cl in clusters]})")
    return EXIT_OK


def _build_task(cfg, out_dir):
    c = _load_corpus(cfg)
    mean_shape, cache = _mean_shape_and_cache(cfg, c, out_dir)
    crops = _crops(cfg, c, mean_shape, cache)
    task = dating.build_task(
        c, crops,
        year_lo=int(cfg.get("dating.year_lo")),
        year_hi=int(cfg.get("dating.year_hi")),
        min_per_year=int(cfg.get("dating.min_per_year")),
        gender=cfg.get("dating.gender"),
        test_frac=float(cfg.get("dating.test_frac")),
        separation_years=int(cfg.get("dating.separation_years")),
        seed=cfg.seed("split"),
        cell_px=int(cfg.get("hog.cell_px")),
        orientations=int(cfg.get("hog.orientations")),
        shrinkage=cfg.get("whitening.shrinkage"),
        denoise=bool(cfg.get("dating.denoise")))
    return c, mean_shape, task


def cmd_date_train(cfg, out_dir):
    _, _, task = _build_task(cfg, out_dir)
    model = dating.train_dating(
        task,
        lr=float(cfg.get("sgd.lr")),
        momentum=float(cfg.get("sgd.momentum")),
        lr_decay=float(cfg.get("sgd.lr_decay")),
        step_iters=int(cfg.get("sgd.step_iters")),
        total_iters=int(cfg.get("sgd.total_iters")),
        batch_size=int(cfg.get("sgd.batch")),
        seed=cfg.seed("sgd"))
    dating_dir = os.path.join(out_dir, "dating")
    os.makedirs(dating_dir, exist_ok=True)
    save_model(model, os.path.join(dating_dir, "model.bin"))
    print(f"trained {task.K}-way dating model on "
          f"{len(task.split.train_ids)} portraits")
    return EXIT_OK


def cmd_date_eval(cfg, out_dir, test_manifest=None):
    model_path = os.path.join(out_dir, "dating", "model.bin")
    if not os.path.isfile(model_path):
        print(f"error: no trained model at {model_path}; "
              "run date-train first", file=sys.stderr)
        return EXIT_DATA
    model = load_model(model_path)
    c, mean_shape, task = _build_task(cfg, out_dir)
    external = None
    if test_manifest:
        ext = corpus_mod.load_manifest(test_manifest, c.schema)
        cache = {p.id: align.warp_to_mean(p, mean_shape) for p in ext}
        crops = _crops(cfg, ext, mean_shape, cache)
        ids, raw, geometry = features.corpus_descriptors(
            crops, cell_px=int(cfg.get("hog.cell_px")),
            orientations=int(cfg.get("hog.orientations")))
        X = features.whiten(task.whitening, raw)
        years = np.array([ext.by_id(pid).year for pid in ids])
        external = (X, years)
    report = dating.evaluate(model, task, corpus=c, external=external)
    payload = dating.write_report(report, os.path.join(out_dir, "dating"),
                                  prefix="external" if external else "dating")
    print(f"accuracy {100 * report.accuracy:.2f}% | "
          f"L1 mean {report.l1_mean:.2f} yr | "
          f"L1 median {report.l1_median:.0f} yr | "
          f"chance {report.chance_display()} | n={report.n_test}")
    return EXIT_OK if payload else EXIT_INTERNAL


def cmd_all(cfg, out_dir):
    for fn in (cmd_ingest, cmd_align, cmd_composite, cmd_smile):
        status = fn(cfg, out_dir)
        if status != EXIT_OK:
            return status
    if cfg.get("mine.decade") is not None:
        status = cmd_mine(cfg, out_dir)
        if status != EXIT_OK:
            return status
    status = cmd_date_train(cfg, out_dir)
    if status != EXIT_OK:
        return status
    return cmd_date_eval(cfg, out_dir)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="portraitminer",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys (file / PORTRAITMINER_* env / --set, last wins):\n"
               + describe_keys())
    parser.add_argument("--config", help="config file (key = value lines)")
    parser.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override a config key (repeatable)")
    parser.add_argument("--output-dir", help="shorthand for run.output_dir")
    parser.add_argument("--seed", type=int, help="shorthand for run.seed")
    parser.add_argument("--jobs", type=int, help="shorthand for run.jobs")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in ("ingest", "align", "composite", "smile",
                 "date-train", "all"):
        sub.add_parser(name)
    mine = sub.add_parser("mine")
    mine.add_argument("--decade", type=int)
    ev = sub.add_parser("date-eval")
    ev.add_argument("--test-manifest",
                    help="external test set (standard manifest format)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set needs K=V, got {item!r}")
            key, val = item.split("=", 1)
            from .config import _parse_value
            overrides[key.strip()] = _parse_value(val)
        if args.output_dir:
            overrides["run.output_dir"] = args.output_dir
        if args.seed is not None:
            overrides["run.seed"] = args.seed
        if args.jobs is not None:
            overrides["run.jobs"] = args.jobs
        cfg = PipelineConfig.load(args.config, overrides=overrides)
        cfg.validate()
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = cfg.get("run.output_dir")
    try:
        _write_run_manifest(cfg, out_dir, args.subcommand)
        if args.subcommand == "ingest":
            return cmd_ingest(cfg, out_dir)
        if args.subcommand == "align":
            return cmd_align(cfg, out_dir)
        if args.subcommand == "composite":
            return cmd_composite(cfg, out_dir)
        if args.subcommand == "smile":
            return cmd_smile(cfg, out_dir)
        if args.subcommand == "mine":
            return cmd_mine(cfg, out_dir, decade=args.decade)
        if args.subcommand == "date-train":
            return cmd_date_train(cfg, out_dir)
        if args.subcommand == "date-eval":
            return cmd_date_eval(cfg, out_dir,
                                 test_manifest=args.test_manifest)
        if args.subcommand == "all":
            return cmd_all(cfg, out_dir)
        return EXIT_INTERNAL
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except corpus_mod.SplitInfeasibleError as exc:
        print(f"infeasible protocol: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except dating.DatingError as exc:
        print(f"infeasible protocol: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (corpus_mod.CorpusError, align.AlignError, features.FeatureError,
            smile.SmileError, modeseek.ModeSeekError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
