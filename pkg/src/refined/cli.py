"""Command-line pipelines: embed, irefined, stack, evaluate, diagnose.

Every run takes a JSON config (flags override single fields), writes its
artifacts under the output directory, and finishes with a manifest carrying
the config hash, stage wall times, and the cost counters.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import instrument
from .dataio import (
    FeatureTable,
    clean_samples,
    load_feature_table,
    normalize_features,
    split_samples,
)
from .distances import (
    load_distance_csv,
    save_distance_binary,
    save_distance_csv,
)
from .ensemble import (
    PredictionSet,
    fit_reference_regressor,
    fit_stacking,
    load_predictions_csv,
    predict_reference,
    predict_stacked,
    save_predictions_csv,
    stack_images,
)
from .errors import ConfigError, DataError, NumericalError, RefinedError
from .evaluation import (
    METRICS,
    bootstrap_metrics,
    gap_statistic,
    kendall_tau_distances,
    kl_divergence_distances,
    null_model_predictions,
    robustness_wins,
    score,
)
from .images import (
    PipelineOptions,
    irefined_pipeline,
    refined_pipeline,
    save_images,
)
from .projections import ProjectionSpec, save_embedding_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class StageTimer:
    def __init__(self):
        self.seconds: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        yield
        self.seconds[name] = time.perf_counter() - t0


def write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _require(cfg: dict, field: str):
    cur = cfg
    for part in field.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise ConfigError(f"missing required config field {field!r}")
        cur = cur[part]
    return cur


def _parse_specs(cfg: dict, minimum: int) -> list[ProjectionSpec]:
    raw = _require(cfg, "projections")
    if not isinstance(raw, list) or len(raw) < minimum:
        raise ConfigError(f"config needs at least {minimum} projection spec(s)")
    specs = []
    for item in raw:
        if "method" not in item:
            raise ConfigError("projection spec missing 'method'")
        try:
            specs.append(
                ProjectionSpec(
                    item["method"], int(item.get("k", 5)), item.get("heat_sigma")
                )
            )
        except DataError as exc:
            raise ConfigError(str(exc)) from exc
    return specs


def _pipeline_options(cfg: dict) -> PipelineOptions:
    hc = cfg.get("hill_climb", {})
    try:
        return PipelineOptions(
            grid=cfg.get("grid", "auto"),
            distance_source=cfg.get("distance_source", "projection"),
            max_sweeps=int(hc.get("max_sweeps", 50)),
            neighborhood=hc.get("neighborhood"),
            fill=float(cfg.get("fill", 0.0)),
            rescale=bool(cfg.get("rescale_distances", True)),
        )
    except DataError as exc:
        raise ConfigError(str(exc)) from exc


def _prepare_table(cfg: dict, timer: StageTimer):
    path = Path(_require(cfg, "input"))
    if not path.exists():
        raise ConfigError(f"input file does not exist: {path}")
    response = _require(cfg, "response_column")
    seed = int(_require(cfg, "split.seed"))
    ratios = tuple(cfg.get("split", {}).get("ratios", (0.8, 0.1, 0.1)))
    mode = cfg.get("normalization", "minmax01")
    if mode != "minmax01":
        raise ConfigError("image pipelines require minmax01 normalization")
    with timer.stage("load"):
        t = load_feature_table(path, response, cfg.get("delimiter", ","))
        t = clean_samples(t, float(cfg.get("missing_threshold", 0.10)))
    with timer.stage("split"):
        split = split_samples(t.n, ratios, seed)
    with timer.stage("normalize"):
        tn, params = normalize_features(t, mode, fit_rows=split.train, clip=True)
    return t, tn, split, params


def _save_image_artifacts(images, outdir: Path, image_format: str) -> list[Path]:
    formats = ("png", "csv") if image_format == "both" else (image_format,)
    written = []
    for fmt in formats:
        written += save_images(images, outdir / "images" / fmt, fmt)
    return written


def _regressor_artifacts(result, tn, split, cfg, outdir, timer) -> list[Path]:
    """Train the reference regressor on the pipeline images and write
    validation/test predictions."""
    reg_cfg = cfg.get("regressor", {})
    lam = float(reg_cfg.get("lambda", 1.0))
    smooth = float(reg_cfg.get("smooth", 0.5))
    written = []
    with timer.stage("regressor"):
        train_set = _subset_images(result.images, split.train)
        model = fit_reference_regressor(train_set, tn.response[split.train], lam, smooth)
        written.append(write_text(outdir / "regressor.json", model.to_json()))
        for name, idx in (("validation", split.validation), ("test", split.test)):
            subset = _subset_images(result.images, idx)
            preds = predict_reference(model, subset)
            pset = PredictionSet(["refined"], preds[:, None], [result.images.sample_ids[i] for i in idx])
            path = outdir / f"predictions_{name}.csv"
            save_predictions_csv(pset, path)
            written.append(path)
    return written


def _subset_images(images, idx):
    from .images import RefinedImageSet

    return RefinedImageSet(
        images.assignment,
        images.images[idx],
        images.fill,
        [images.sample_ids[i] for i in idx],
    )


def write_text(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def _finish(command: str, cfg: dict, outdir: Path, timer: StageTimer, artifacts: list[Path]) -> int:
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "counters": instrument.counters.snapshot(),
        "stages": {k: round(v, 6) for k, v in timer.seconds.items()},
        "artifacts": sorted(str(p.relative_to(outdir)) for p in artifacts),
    }
    write_json(outdir / "manifest.json", manifest)
    return EXIT_OK


def _outdir(cfg: dict) -> Path:
    out = Path(_require(cfg, "output_dir"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_embed(cfg: dict) -> int:
    instrument.counters.reset()
    timer = StageTimer()
    outdir = _outdir(cfg)
    specs = _parse_specs(cfg, 1)
    if len(specs) != 1:
        raise ConfigError("embed takes exactly one projection spec")
    t, tn, split, params = _prepare_table(cfg, timer)
    options = _pipeline_options(cfg)
    with timer.stage("pipeline"):
        result = refined_pipeline(tn, specs[0], options)
    artifacts = []
    with timer.stage("write"):
        artifacts.append(write_text(outdir / "split.json", split.to_json()))
        epath = outdir / "embedding.csv"
        save_embedding_csv(result.embedding, epath)
        artifacts.append(epath)
        dpath = outdir / "target_distance.csv"
        save_distance_csv(result.images.assignment.target, dpath)
        artifacts.append(dpath)
        artifacts += _save_image_artifacts(result.images, outdir, cfg.get("image_format", "both"))
        artifacts.append(write_json(outdir / "report.json", _json_report(result.report)))
    if cfg.get("regressor", {}).get("train", False):
        artifacts += _regressor_artifacts(result, tn, split, cfg, outdir, timer)
    return _finish("embed", cfg, outdir, timer, artifacts)


def _json_report(report: dict) -> dict:
    out = dict(report)
    out.pop("sampler_trace", None)
    return out


def cmd_irefined(cfg: dict) -> int:
    instrument.counters.reset()
    timer = StageTimer()
    outdir = _outdir(cfg)
    specs = _parse_specs(cfg, 2)
    mode = cfg.get("fusion_mode", "arithmetic")
    if mode not in ("arithmetic", "geometric"):
        raise ConfigError(f"unknown fusion mode {mode!r}")
    t, tn, split, params = _prepare_table(cfg, timer)
    options = _pipeline_options(cfg)
    sampler = cfg.get("sampler")
    if sampler is not None:
        sampler = dict(sampler)
        if "seed" not in sampler:
            raise ConfigError("sampler config requires a seed")
        if "prior" in sampler:
            sampler["prior"] = tuple(sampler["prior"])
    with timer.stage("pipeline"):
        result = irefined_pipeline(tn, specs, mode, options, sampler=sampler)
    artifacts = []
    with timer.stage("write"):
        artifacts.append(write_text(outdir / "split.json", split.to_json()))
        epath = outdir / "embedding.csv"
        save_embedding_csv(result.embedding, epath)
        artifacts.append(epath)
        fpath = outdir / "fused_distance.csv"
        save_distance_csv(result.fused.d_bar, fpath)
        artifacts.append(fpath)
        bpath = outdir / "fused_distance.bin"
        save_distance_binary(result.fused.d_bar, bpath)
        artifacts.append(bpath)
        artifacts += _save_image_artifacts(result.images, outdir, cfg.get("image_format", "both"))
        if "sampler_trace" in result.report:
            tpath = outdir / "sampler_trace.jsonl"
            lines = [json.dumps(rec, sort_keys=True) for rec in result.report["sampler_trace"]]
            write_text(tpath, "\n".join(lines) + "\n")
            artifacts.append(tpath)
        artifacts.append(write_json(outdir / "report.json", _json_report(result.report)))
    if cfg.get("regressor", {}).get("train", False):
        artifacts += _regressor_artifacts(result, tn, split, cfg, outdir, timer)
    return _finish("irefined", cfg, outdir, timer, artifacts)


def cmd_stack(cfg: dict) -> int:
    instrument.counters.reset()
    timer = StageTimer()
    outdir = _outdir(cfg)
    specs = _parse_specs(cfg, 1)
    t, tn, split, params = _prepare_table(cfg, timer)
    options = _pipeline_options(cfg)
    reg_cfg = cfg.get("regressor", {})
    lam = float(reg_cfg.get("lambda", 1.0))
    smooth = float(reg_cfg.get("smooth", 0.5))

    artifacts = [write_text(outdir / "split.json", split.to_json())]
    image_sets = []
    with timer.stage("pipelines"):
        results = [refined_pipeline(tn, spec, options) for spec in specs]
    with timer.stage("regressors"):
        val_cols, test_cols, tags = [], [], []
        for spec, result in zip(specs, results):
            train_set = _subset_images(result.images, split.train)
            model = fit_reference_regressor(train_set, tn.response[split.train], lam, smooth)
            val_cols.append(predict_reference(model, _subset_images(result.images, split.validation)))
            test_cols.append(predict_reference(model, _subset_images(result.images, split.test)))
            tags.append(spec.tag)
            image_sets.append(result.images)
        if cfg.get("image_stack", False):
            tensor = stack_images(image_sets, tags)
            from .ensemble import ImageTensorSet

            train_tensor = ImageTensorSet(
                tensor.tensors[split.train], tags, [tensor.sample_ids[i] for i in split.train], tensor.grid_size
            )
            tensor_model = fit_reference_regressor(train_tensor, tn.response[split.train], lam, smooth)
            for name, idx, cols in (
                ("validation", split.validation, val_cols),
                ("test", split.test, test_cols),
            ):
                sub = ImageTensorSet(
                    tensor.tensors[idx], tags, [tensor.sample_ids[i] for i in idx], tensor.grid_size
                )
                cols.append(predict_reference(tensor_model, sub))
            tags.append("tensor")

    with timer.stage("stacking"):
        ids_val = [tn.sample_ids[i] for i in split.validation]
        ids_test = [tn.sample_ids[i] for i in split.test]
        pset_val = PredictionSet(list(tags), np.column_stack(val_cols), ids_val)
        stacker = fit_stacking(pset_val, tn.response[split.validation])
        pset_test = PredictionSet(list(tags), np.column_stack(test_cols), ids_test)
        stacked_val = predict_stacked(stacker, pset_val)
        stacked_test = predict_stacked(stacker, pset_test)

        y_val = tn.response[split.validation]
        rmse = lambda yhat: float(np.sqrt(((y_val - yhat) ** 2).mean()))
        val_rmse = {tag: rmse(pset_val.column(tag)) for tag in tags}
        val_rmse["stacked"] = rmse(stacked_val)
        assert val_rmse["stacked"] <= min(v for k, v in val_rmse.items() if k != "stacked") + 1e-9

    with timer.stage("write"):
        artifacts.append(write_text(outdir / "stacking.json", stacker.to_json()))
        out_val = PredictionSet(
            list(tags) + ["stacked"], np.column_stack([pset_val.yhat, stacked_val]), ids_val
        )
        out_test = PredictionSet(
            list(tags) + ["stacked"], np.column_stack([pset_test.yhat, stacked_test]), ids_test
        )
        for name, pset in (("validation", out_val), ("test", out_test)):
            path = outdir / f"predictions_{name}.csv"
            save_predictions_csv(pset, path)
            artifacts.append(path)
        truth = outdir / "truth_test.csv"
        _write_truth_csv(truth, ids_test, tn.response[split.test])
        artifacts.append(truth)
        nontest = outdir / "responses_nontest.csv"
        idx_nontest = np.concatenate([split.train, split.validation])
        _write_truth_csv(nontest, [tn.sample_ids[i] for i in idx_nontest], tn.response[idx_nontest])
        artifacts.append(nontest)
        report = {
            "validation_rmse": val_rmse,
            "tags": list(tags),
            "counters": instrument.counters.snapshot(),
        }
        artifacts.append(write_json(outdir / "report.json", report))
        if cfg.get("write_images", False):
            for tag, images in zip(tags, image_sets):
                safe = tag.replace("(", "_").replace(")", "").replace(",", "_").replace("=", "")
                artifacts += save_images(images, outdir / "images" / safe, cfg.get("image_format", "csv"))
    return _finish("stack", cfg, outdir, timer, artifacts)


def _write_truth_csv(path: Path, ids, y) -> None:
    lines = ["sample_id,y"]
    lines += [f"{sid},{format(v, '.17g')}" for sid, v in zip(ids, y)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_truth_csv(path: Path) -> tuple[list[str], np.ndarray]:
    rows = path.read_text(encoding="utf-8").strip().splitlines()
    ids, ys = [], []
    for line in rows[1:]:
        sid, _, val = line.rpartition(",")
        ids.append(sid)
        ys.append(float(val))
    return ids, np.array(ys)


def cmd_evaluate(cfg: dict) -> int:
    instrument.counters.reset()
    timer = StageTimer()
    outdir = _outdir(cfg)
    pred_path = Path(_require(cfg, "predictions"))
    truth_path = Path(_require(cfg, "truth"))
    train_path = Path(_require(cfg, "train_responses"))
    for p in (pred_path, truth_path, train_path):
        if not p.exists():
            raise ConfigError(f"input file does not exist: {p}")
    B = int(_require(cfg, "bootstrap.B"))
    seed = int(_require(cfg, "bootstrap.seed"))
    null_seed = int(_require(cfg, "null_seed"))

    with timer.stage("load"):
        preds = load_predictions_csv(pred_path)
        truth_ids, y = _read_truth_csv(truth_path)
        _, y_train = _read_truth_csv(train_path)
        if truth_ids != list(preds.sample_ids):
            raise DataError("truth sample ids do not match prediction rows")
        ybar_ref = float(y_train.mean())

    with timer.stage("score"):
        null_col = null_model_predictions(y_train, len(y), null_seed)
        all_preds = PredictionSet(
            list(preds.model_tags) + ["null"],
            np.column_stack([preds.yhat, null_col]),
            list(preds.sample_ids),
        )
        metrics = {tag: score(y, all_preds.column(tag), ybar_ref).as_dict() for tag in all_preds.model_tags}

    with timer.stage("bootstrap"):
        summaries = bootstrap_metrics(y, all_preds, ybar_ref, B=B, seed=seed)

    gap_cfg = cfg.get("gap", {})
    gaps = {}
    if gap_cfg.get("enabled", True):
        with timer.stage("gap"):
            kmax = int(gap_cfg.get("kmax", 4))
            b_ref = int(gap_cfg.get("b_ref", 10))
            gseed = int(gap_cfg.get("seed", seed))
            null_summary = summaries["null"]
            for tag in preds.model_tags:
                gaps[tag] = {}
                for metric in METRICS:
                    pts = np.concatenate(
                        [summaries[tag].replicates[metric], null_summary.replicates[metric]]
                    )
                    sources = np.concatenate([np.zeros(B, dtype=int), np.ones(B, dtype=int)])
                    gaps[tag][metric] = gap_statistic(
                        pts, kmax=kmax, b_ref=b_ref, seed=gseed, sources=sources
                    ).as_dict()

    with timer.stage("robustness"):
        robustness = {}
        tags = all_preds.model_tags
        for a in tags:
            for b in tags:
                if a == b:
                    continue
                robustness[f"{a}|{b}"] = {
                    m: robustness_wins(summaries[a], summaries[b], m) for m in METRICS
                }

    artifacts = []
    with timer.stage("write"):
        artifacts.append(write_json(outdir / "metrics.json", metrics))
        artifacts.append(
            write_json(
                outdir / "bootstrap.json",
                {tag: s.as_dict() for tag, s in summaries.items()},
            )
        )
        if cfg.get("write_replicates", False):
            for metric in METRICS:
                path = outdir / f"replicates_{metric}.csv"
                header = ",".join(tags)
                cols = np.column_stack([summaries[t].replicates[metric] for t in tags])
                lines = [header] + [",".join(format(v, ".17g") for v in row) for row in cols]
                write_text(path, "\n".join(lines) + "\n")
                artifacts.append(path)
        if gaps:
            artifacts.append(write_json(outdir / "gap.json", gaps))
        artifacts.append(write_json(outdir / "robustness.json", robustness))
    return _finish("evaluate", cfg, outdir, timer, artifacts)


def cmd_diagnose(cfg: dict) -> int:
    instrument.counters.reset()
    timer = StageTimer()
    outdir = _outdir(cfg)
    with timer.stage("distances"):
        if "distances" in cfg:
            paths = [Path(p) for p in cfg["distances"]]
            for p in paths:
                if not p.exists():
                    raise ConfigError(f"input file does not exist: {p}")
            mats = [load_distance_csv(p) for p in paths]
            tags = cfg.get("tags") or [p.stem for p in paths]
            if len(tags) != len(mats):
                raise ConfigError("tags length does not match distance files")
        else:
            specs = _parse_specs(cfg, 1)
            t, tn, split, params = _prepare_table(cfg, timer)
            from .distances import pairwise_euclidean
            from .images import _spec_distance

            options = _pipeline_options(cfg)
            mats = [pairwise_euclidean(tn)]
            tags = ["ambient"]
            for spec in specs:
                mats.append(_spec_distance(tn, spec, options))
                tags.append(spec.tag)
    A = len(mats)
    if A < 2:
        raise ConfigError("diagnose needs at least two distance matrices")
    bins = int(cfg.get("bins", 50))
    with timer.stage("diagnostics"):
        tau = np.ones((A, A))
        kl = np.zeros((A, A))
        kl_log = np.zeros((A, A))
        log_ok = all((m.condensed() > 0).all() for m in mats)
        for i in range(A):
            for j in range(A):
                if i != j:
                    tau[i, j] = kendall_tau_distances(mats[i], mats[j])
                    kl[i, j] = kl_divergence_distances(mats[i], mats[j], bins=bins)
                    if log_ok:
                        kl_log[i, j] = kl_divergence_distances(
                            mats[i], mats[j], log_scale=True, bins=bins
                        )
    artifacts = []
    with timer.stage("write"):
        payload = {
            "tags": list(tags),
            "bins": bins,
            "kendall_tau": tau.tolist(),
            "kl_divergence": kl.tolist(),
            "kl_divergence_log": kl_log.tolist() if log_ok else None,
        }
        artifacts.append(write_json(outdir / "diagnostics.json", payload))
        lines = ["," + ",".join(tags)]
        for tag, row in zip(tags, tau):
            lines.append(tag + "," + ",".join(format(v, ".17g") for v in row))
        artifacts.append(write_text(outdir / "kendall_tau.csv", "\n".join(lines) + "\n"))
    return _finish("diagnose", cfg, outdir, timer, artifacts)


COMMANDS = {
    "embed": cmd_embed,
    "irefined": cmd_irefined,
    "stack": cmd_stack,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refined",
        description="Feature-to-image embedding pipelines and their evaluation harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--output-dir", default=None)
        p.add_argument("--input", default=None)
        p.add_argument("--seed", type=int, default=None, help="split seed override")
        p.add_argument("--fusion-mode", choices=["arithmetic", "geometric"], default=None)
        p.add_argument("--distance-source", choices=["projection", "ambient"], default=None)
        p.add_argument("--no-rescale", action="store_true", help="disable unit-mean distance rescaling")
        p.add_argument("--grid", default=None)
        p.add_argument("--max-sweeps", type=int, default=None)
        p.add_argument("--neighborhood", choices=["all_pairs", "adjacent_cells"], default=None)
        p.add_argument("--image-format", choices=["png", "csv", "both"], default=None)
        p.add_argument("--train-regressor", action="store_true")
        p.add_argument("--image-stack", action="store_true")
        p.add_argument("--write-images", action="store_true")
        p.add_argument("--write-replicates", action="store_true")
        p.add_argument("--bootstrap-b", type=int, default=None)
        p.add_argument("--bootstrap-seed", type=int, default=None)
        p.add_argument("--kmax", type=int, default=None)
        p.add_argument("--bins", type=int, default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")

    if args.output_dir is not None:
        cfg["output_dir"] = args.output_dir
    if args.input is not None:
        cfg["input"] = args.input
    if args.seed is not None:
        cfg.setdefault("split", {})["seed"] = args.seed
    if args.fusion_mode is not None:
        cfg["fusion_mode"] = args.fusion_mode
    if args.distance_source is not None:
        cfg["distance_source"] = args.distance_source
    if args.no_rescale:
        cfg["rescale_distances"] = False
    if args.grid is not None:
        cfg["grid"] = args.grid if args.grid == "auto" else int(args.grid)
    if args.max_sweeps is not None:
        cfg.setdefault("hill_climb", {})["max_sweeps"] = args.max_sweeps
    if args.neighborhood is not None:
        cfg.setdefault("hill_climb", {})["neighborhood"] = args.neighborhood
    if args.image_format is not None:
        cfg["image_format"] = args.image_format
    if args.train_regressor:
        cfg.setdefault("regressor", {})["train"] = True
    if args.image_stack:
        cfg["image_stack"] = True
    if args.write_images:
        cfg["write_images"] = True
    if args.write_replicates:
        cfg["write_replicates"] = True
    if args.bootstrap_b is not None:
        cfg.setdefault("bootstrap", {})["B"] = args.bootstrap_b
    if args.bootstrap_seed is not None:
        cfg.setdefault("bootstrap", {})["seed"] = args.bootstrap_seed
    if args.kmax is not None:
        cfg.setdefault("gap", {})["kmax"] = args.kmax
    if args.bins is not None:
        cfg["bins"] = args.bins
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
