"""Command-line front end.

Every subcommand reads a plain-text config (``--config``, overridable with
``--set key=value``), writes its outputs and a JSON run manifest next to
them.  ``replay`` re-executes a manifest, optionally rebasing its paths.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, forest, metrics, phantom, preprocess, report, segmenter, survival
from .config import Config
from .errors import ConfigError, DataError, PipelineError
from .volume_io import (
    case_path,
    list_cases,
    load_case,
    load_case_volume,
    load_nifti,
    save_case,
    save_nifti,
    validate_labels,
)

log = logging.getLogger("gliomaseg")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    tool_version: str = __version__
    wall_seconds: float = 0.0
    deterministic: bool = False
    jobs: int = 1
    platform: str = field(default_factory=platform.platform)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        try:
            d = json.loads(Path(path).read_text())
            return cls(**d)
        except (OSError, ValueError, TypeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc


@dataclass
class RunContext:
    config: Config
    jobs: int = 1
    deterministic: bool = False
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    seed: int | None = None

    def out(self, path) -> Path:
        self.outputs.append(str(path))
        return Path(path)


def _map(fn, items, jobs: int):
    """Order-preserving map, across processes when jobs > 1."""
    items = list(items)
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _case_ids(cfg: Config, directory) -> list[str]:
    ids = cfg.get_list("cases") or tuple(list_cases(directory))
    if not ids:
        raise DataError(f"no cases found under {directory}")
    return list(ids)


def _brain_mask(directory, case) -> np.ndarray:
    g = load_case_volume(directory, case.case_id, "brain")
    return g.values.astype(bool) if g is not None else preprocess.compute_brain_mask(case)


# ---------------------------------------------------------------------------
# phantom-gen


def _phantom_spec(cfg: Config) -> phantom.PhantomSpec:
    dims = cfg.get_list("dims", (64, 64, 64), int)
    base = phantom.PhantomSpec()
    s = min(dims) / 64.0
    kw = dict(
        dims=tuple(dims),
        seed=cfg.get_int("seed", 0),
        brain_semi_axes=tuple(a * s for a in base.brain_semi_axes),
        wt_radius_range=tuple(r * s for r in base.wt_radius_range),
        tumor_count=cfg.get_int("tumor_count", 1),
        noise_std=cfg.get_float("noise_std", base.noise_std),
        survival_noise_std=cfg.get_float("survival_noise_std", base.survival_noise_std),
    )
    terms = []
    for item in cfg.get_list("bias_terms", ()):
        exps, coef = item.split(":")
        terms.append((tuple(int(e) for e in exps.split(".")), float(coef)))
    kw["bias_terms"] = tuple(terms)
    return phantom.PhantomSpec(**kw)


def cmd_phantom_gen(ctx: RunContext) -> Path:
    cfg = ctx.config
    cfg.require("output_dir", "count")
    spec = _phantom_spec(cfg)
    ctx.seed = spec.seed
    out = ctx.out(cfg.get_path("output_dir"))
    ids = phantom.generate_dataset(spec, cfg.get_int("count"), out, start=cfg.get_int("start", 0))
    log.info("wrote %d phantoms to %s", len(ids), out)
    return out / "phantom-gen.manifest.json"


# ---------------------------------------------------------------------------
# preprocess


def _preprocess_one(args):
    in_dir, out_dir, case_id, reference, pcfg = args
    case = load_case(in_dir, case_id)
    processed, prov = preprocess.preprocess_case(case, reference, pcfg)
    save_case(processed, out_dir)
    mask = preprocess.compute_brain_mask(case)
    save_nifti(case.flair.with_values(mask.astype(np.uint8)), case_path(out_dir, case_id, "brain"))
    preprocess.write_provenance(Path(out_dir) / case_id / f"{case_id}_provenance.json", prov, pcfg)
    return case_id


def cmd_preprocess(ctx: RunContext) -> Path:
    cfg = ctx.config
    cfg.require("input_dir", "output_dir")
    in_dir, out_dir = cfg.get_path("input_dir"), cfg.get_path("output_dir")
    ctx.inputs.append(str(in_dir))
    pcfg = preprocess.PreprocessConfig.from_mapping(cfg.values)
    ids = _case_ids(cfg, in_dir)
    reference = None
    if "histogram_match" in pcfg.steps:
        ref_id = pcfg.reference_case or sorted(list_cases(in_dir))[0]
        reference = preprocess.prepare_reference(load_case(in_dir, ref_id), pcfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    _map(_preprocess_one, [(in_dir, out_dir, i, reference, pcfg) for i in ids], ctx.jobs)
    ctx.out(out_dir)
    log.info("preprocessed %d cases into %s", len(ids), out_dir)
    return out_dir / "preprocess.manifest.json"


# ---------------------------------------------------------------------------
# train / segment


def cmd_train(ctx: RunContext) -> Path:
    cfg = ctx.config
    cfg.require("data_dir", "model_out")
    data_dir, model_out = cfg.get_path("data_dir"), cfg.get_path("model_out")
    ctx.inputs.append(str(data_dir))
    cases = [load_case(data_dir, i) for i in _case_ids(cfg, data_dir)]
    seed = cfg.get_int("seed", 0)
    ctx.seed = seed
    base = cfg.get_int("base_channels", 8)
    model = segmenter.build_model(
        segmenter.PathConfig(cfg.get_int("local_levels", 3), base),
        segmenter.PathConfig(cfg.get_int("global_levels", 2), base),
        seed=seed,
        fusion=cfg.get("fusion", "conv"),
    )
    dims = cfg.get_list("volume_dims", None, int)
    if dims is None:
        dims = segmenter.target_dims_for(model, tuple(max(c.dims[a] for c in cases) for a in range(3)))
    model_out.parent.mkdir(parents=True, exist_ok=True)
    tcfg = segmenter.TrainConfig(
        epochs=cfg.get_int("epochs", 30),
        lr=cfg.get_float("lr", 1e-3),
        seed=seed,
        class_weights=cfg.get_list("class_weights", (1.0, 1.0, 1.0, 1.0), float),
        volume_dims=tuple(dims),
        checkpoint_every=cfg.get_int("checkpoint_every", 0),
        checkpoint_dir=str(model_out.parent),
        aux_weight=cfg.get_float("aux_weight", 0.5),
    )
    result = segmenter.train(model, cases, tcfg)
    segmenter.save_model(model, ctx.out(model_out), extra={"loss_curve": result.loss_curve})
    curve = ctx.out(model_out.with_name(model_out.name + ".curve.csv"))
    with open(curve, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "soft_wt_dice"])
        for e, (l, d) in enumerate(zip(result.loss_curve, result.wt_dice_curve), start=1):
            w.writerow([e, f"{l:.6f}", f"{d:.6f}"])
    ctx.outputs.extend(result.checkpoints)
    return model_out.with_name(model_out.name + ".manifest.json")


def _segment_one(args):
    model_path, in_dir, out_dir, case_id, path = args
    model = segmenter.load_model(model_path)
    case = load_case(in_dir, case_id)
    labels = segmenter.predict_labels(model, case, path)
    save_nifti(labels, Path(out_dir) / f"{case_id}.nii.gz")
    return case_id


def cmd_segment(ctx: RunContext) -> Path:
    cfg = ctx.config
    cfg.require("model", "input_dir", "output_dir")
    model_path, in_dir, out_dir = cfg.get_path("model"), cfg.get_path("input_dir"), cfg.get_path("output_dir")
    ctx.inputs += [str(model_path), str(in_dir)]
    path = cfg.get("path", "fused")
    if path not in ("fused", "local", "global"):
        raise DataError(f"unknown output path {path!r}")
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = _case_ids(cfg, in_dir)
    _map(_segment_one, [(model_path, in_dir, out_dir, i, path) for i in ids], ctx.jobs)
    ctx.out(out_dir)
    return out_dir / "segment.manifest.json"


# ---------------------------------------------------------------------------
# evaluate


def _prediction_ids(pred_dir: Path) -> list[str]:
    ids = sorted(p.name[: -len(".nii.gz")] for p in pred_dir.glob("*.nii.gz"))
    if not ids:
        raise DataError(f"no predictions (*.nii.gz) in {pred_dir}")
    return ids


def _evaluate_one(args):
    pred_dir, truth_dir, case_id = args
    pred = load_nifti(Path(pred_dir) / f"{case_id}.nii.gz")
    truth = load_case_volume(truth_dir, case_id, "seg")
    if truth is None:
        raise DataError(f"no ground truth for {case_id} under {truth_dir}")
    return metrics.evaluate_case(validate_labels(pred.values), validate_labels(truth.values),
                                 truth.spacing, case_id)


def cmd_evaluate(ctx: RunContext) -> Path:
    cfg = ctx.config
    cfg.require("pred_dir", "truth_dir", "output_dir")
    pred_dir, truth_dir, out_dir = (cfg.get_path(k) for k in ("pred_dir", "truth_dir", "output_dir"))
    ctx.inputs += [str(pred_dir), str(truth_dir)]
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = cfg.get_list("cases") or _prediction_ids(pred_dir)
    reports = _map(_evaluate_one, [(pred_dir, truth_dir, i) for i in ids], ctx.jobs)
    rows_path = metrics.write_case_csv(reports, ctx.out(out_dir / "evaluation_cases.csv"))
    metrics.write_aggregate_json(metrics.read_case_csv(rows_path), ctx.out(out_dir / "evaluation_summary.json"))
    return out_dir / "evaluate.manifest.json"


# ---------------------------------------------------------------------------
# survival


def _features_one(args):
    data_dir, labels_dir, case_id = args
    case = load_case(data_dir, case_id)
    if labels_dir:
        g = load_nifti(Path(labels_dir) / f"{case_id}.nii.gz")
        labels = validate_labels(g.values)
    elif case.labels is not None:
        labels = case.labels.values
    else:
        raise DataError(f"{case_id}: no labels (set labels_dir or provide *_seg volumes)")
    return survival.SurvivalRecord(case_id, survival.extract_features(case, labels, _brain_mask(data_dir, case)))


def _collect_features(ctx: RunContext) -> list[survival.SurvivalRecord]:
    cfg = ctx.config
    data_dir, labels_dir = cfg.get_path("data_dir"), cfg.get_path("labels_dir")
    ctx.inputs.append(str(data_dir))
    if labels_dir:
        ctx.inputs.append(str(labels_dir))
    ids = _case_ids(cfg, data_dir)
    return _map(_features_one, [(data_dir, labels_dir, i) for i in ids], ctx.jobs)


def _read_truth(path) -> dict[str, float]:
    try:
        return phantom.read_truth_csv(path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read survival table {path}: {exc}") from exc


def cmd_survival_train(ctx: RunContext) -> Path:
    cfg = ctx.config
    cfg.require("data_dir", "survival_csv", "model_out")
    model_out = cfg.get_path("model_out")
    truth = _read_truth(cfg.get_path("survival_csv"))
    ctx.inputs.append(cfg.get("survival_csv"))
    records = [r for r in _collect_features(ctx) if r.case_id in truth]
    for r in records:
        r.true_days = truth[r.case_id]
    seed = cfg.get_int("seed", 0)
    ctx.seed = seed
    model_out.parent.mkdir(parents=True, exist_ok=True)
    survival.write_features_csv(records, ctx.out(model_out.with_name(model_out.name + ".features.csv")))
    n_trees, depth = cfg.get_int("n_trees", 30), cfg.get_int("max_depth", 10)
    columns = list(cfg.get_list("feature_columns", survival.FEATURE_COLUMNS))
    if cfg.get_bool("cv", False):
        grid = []
        for item in cfg.get_list("cv_grid", ("30x10",)):
            t, d = item.lower().split("x")
            grid.append((int(t), int(d)))
        X = survival.feature_matrix(records, columns)
        y = np.array([r.true_days for r in records])
        (n_trees, depth), scores = forest.cross_validate(X, y, cfg.get_int("folds", 5), grid, seed)
        cv_path = ctx.out(model_out.with_name(model_out.name + ".cv.json"))
        cv_path.write_text(json.dumps({"best": [n_trees, depth],
                                       "scores": {f"{t}x{d}": s for (t, d), s in scores.items()}},
                                      indent=2, sort_keys=True))
    model = survival.train_survival(records, forest.ForestConfig(n_trees, depth, seed), jobs=ctx.jobs,
                                    columns=columns)
    model.save(ctx.out(model_out))
    return model_out.with_name(model_out.name + ".manifest.json")


def cmd_survival_predict(ctx: RunContext) -> Path:
    cfg = ctx.config
    cfg.require("model", "data_dir", "output")
    model = forest.ForestModel.load(cfg.get_path("model"))
    ctx.inputs.append(cfg.get("model"))
    out = cfg.get_path("output")
    out.parent.mkdir(parents=True, exist_ok=True)
    records = survival.predict_survival(model, _collect_features(ctx))
    survival.write_predictions_csv(records, ctx.out(out))
    return out.with_name(out.name + ".manifest.json")


def cmd_survival_evaluate(ctx: RunContext) -> Path:
    cfg = ctx.config
    cfg.require("predictions", "survival_csv", "output")
    preds = survival.read_predictions_csv(cfg.get_path("predictions"))
    truth = _read_truth(cfg.get_path("survival_csv"))
    ctx.inputs += [cfg.get("predictions"), cfg.get("survival_csv")]
    missing = sorted(set(preds) - set(truth))
    if missing:
        raise DataError(f"no survival truth for {missing[:3]}")
    records = [survival.SurvivalRecord(k, None, truth[k], v) for k, v in sorted(preds.items())]
    rep = survival.evaluate_survival(records)
    out = cfg.get_path("output")
    out.parent.mkdir(parents=True, exist_ok=True)
    survival.write_report_json(rep, ctx.out(out))
    return out.with_name(out.name + ".manifest.json")


# ---------------------------------------------------------------------------
# report


def cmd_report(ctx: RunContext) -> Path:
    cfg = ctx.config
    cfg.require("output_dir")
    out_dir = cfg.get_path("output_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = cfg.get_path("evaluation")
    if summary:
        ctx.inputs.append(str(summary))
        agg = json.loads(summary.read_text())
        text = report.segmentation_table(agg)
        ctx.out(out_dir / "table_segmentation.tsv").write_text(text)
        print(text, end="")
    surv = cfg.get_path("survival_report")
    if surv:
        ctx.inputs.append(str(surv))
        text = report.survival_table(json.loads(surv.read_text()))
        ctx.out(out_dir / "table_survival.tsv").write_text(text)
        print(text, end="")
    data_dir, pred_dir = cfg.get_path("data_dir"), cfg.get_path("pred_dir")
    if data_dir:
        ctx.inputs.append(str(data_dir))
        ids = _case_ids(cfg, data_dir)[: cfg.get_int("max_overlays", 3)]
        for case_id in ids:
            case = load_case(data_dir, case_id)
            sets = {}
            if case.labels is not None:
                sets["truth"] = case.labels.values
            if pred_dir:
                sets["prediction"] = load_nifti(pred_dir / f"{case_id}.nii.gz").values
            if not sets:
                raise DataError(f"{case_id}: nothing to overlay (no labels, no pred_dir)")
            report.render_overlay(case.t2.values, sets, ctx.out(out_dir / f"overlay_{case_id}.png"), case_id)
    if not ctx.outputs:
        raise DataError("report needs at least one of evaluation, survival_report, data_dir")
    return out_dir / "report.manifest.json"


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "survival-train": cmd_survival_train,
    "survival-predict": cmd_survival_predict,
    "survival-evaluate": cmd_survival_evaluate,
    "report": cmd_report,
}


def run_command(command: str, config: Config, jobs: int = 1, deterministic: bool = False) -> Path:
    """Execute one subcommand and write its manifest; returns the manifest path."""
    if deterministic:
        jobs = 1
    ctx = RunContext(config, jobs=max(1, jobs), deterministic=deterministic)
    t0 = time.perf_counter()
    if deterministic:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            manifest_path = COMMANDS[command](ctx)
    else:
        manifest_path = COMMANDS[command](ctx)
    RunManifest(
        command=command,
        config=config.snapshot(),
        seed=ctx.seed,
        inputs=ctx.inputs,
        outputs=ctx.outputs,
        wall_seconds=round(time.perf_counter() - t0, 3),
        deterministic=deterministic,
        jobs=ctx.jobs,
    ).write(manifest_path)
    log.info("manifest: %s", manifest_path)
    return manifest_path


def rebase_config(values: dict, old: str, new: str) -> dict:
    return {k: (new + v[len(old):] if v.startswith(old) else v) for k, v in values.items()}


def replay(manifest_path, rebase: list[str] | None = None, jobs: int | None = None) -> Path:
    m = RunManifest.read(manifest_path)
    if m.command not in COMMANDS:
        raise DataError(f"manifest names unknown command {m.command!r}")
    values = dict(m.config)
    for item in rebase or ():
        if "=" not in item:
            raise DataError(f"--rebase expects OLD=NEW, got {item!r}")
        old, new = item.split("=", 1)
        values = rebase_config(values, old, new)
    return run_command(m.command, Config(values, str(manifest_path)),
                       jobs=m.jobs if jobs is None else jobs, deterministic=m.deterministic)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gliomaseg", description="Glioma segmentation and survival pipeline")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override or add a config key (repeatable)")
        sp.add_argument("--jobs", type=int, default=1, help="parallel workers for per-case stages")
        sp.add_argument("--deterministic", action="store_true",
                        help="single worker, single BLAS thread")
    rp = sub.add_parser("replay", help="re-run a command from its manifest")
    rp.add_argument("manifest")
    rp.add_argument("--rebase", action="append", default=[], metavar="OLD=NEW",
                    help="rewrite path prefixes in the recorded config")
    rp.add_argument("--jobs", type=int, default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "replay":
            path = replay(args.manifest, args.rebase, args.jobs)
        else:
            cfg = Config.load(args.config) if args.config else Config()
            cfg = cfg.with_overrides(args.set)
            path = run_command(args.command, cfg, args.jobs, args.deterministic)
    except PipelineError as exc:
        print(f"{exc.category}: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}",
              file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    except OSError as exc:
        print(f"IoError: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
