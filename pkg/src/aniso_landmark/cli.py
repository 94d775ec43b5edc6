"""Command line entry point: ``aniso-landmark {synth,train,eval,render,gradcheck}``.

Exit codes:
    0  success
    2  invalid configuration or arguments
    3  I/O error (unreadable input, unwritable output, malformed dataset)
    4  training diverged
    5  checkpoint and dataset are incompatible
    6  gradient audit failed

Machine-readable summaries go to stdout as JSON; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_SHAPE, EXIT_AUDIT = 0, 2, 3, 4, 5, 6

log = logging.getLogger("aniso_landmark")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def load_schema(name: str) -> dict:
    return json.loads(resources.files("aniso_landmark").joinpath("schemas", name).read_text())


def _load_json(path, schema_name: str | None = None) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise CliError(EXIT_IO, f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    if schema_name:
        try:
            jsonschema.validate(data, load_schema(schema_name))
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise CliError(EXIT_CONFIG, f"{path}: {where}: {exc.message}") from exc
    return data


def _emit(summary: dict) -> None:
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")


def _writable_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"{path}: cannot create directory ({exc.strerror})") from exc
    return path


def _read_dataset(path):
    from .data import DatasetFormatError, read_dataset

    try:
        return read_dataset(path)
    except DatasetFormatError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc


def _load_checkpoint(path):
    from .network import ShapeError, load_checkpoint

    try:
        return load_checkpoint(path)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise CliError(EXIT_IO, f"{path}: cannot load checkpoint ({exc})") from exc
    except ShapeError as exc:
        raise CliError(EXIT_SHAPE, str(exc)) from exc


def _check_compatible(cfg, dataset) -> None:
    if tuple(dataset.image_size) != tuple(cfg.input_size) or dataset.num_landmarks != cfg.num_landmarks:
        raise CliError(EXIT_SHAPE, f"checkpoint expects {tuple(cfg.input_size)} images with "
                                   f"{cfg.num_landmarks} landmarks, dataset has {tuple(dataset.image_size)} "
                                   f"with {dataset.num_landmarks}")


def cmd_synth(args) -> int:
    from .data import ConfigError, SceneConfig, generate_dataset, write_dataset

    raw = _load_json(args.config, "scene_config.schema.json") if args.config else {}
    try:
        scene = SceneConfig.from_dict(raw)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"scene config: {exc}") from exc
    if args.count < 0:
        raise CliError(EXIT_CONFIG, "--count must be non-negative")
    try:
        samples = generate_dataset(scene, args.count, args.seed)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    out = _writable_dir(args.out)
    try:
        write_dataset(samples, out, scene.pixel_spacing_mm, scene=scene)
    except OSError as exc:
        raise CliError(EXIT_IO, f"{out}: {exc}") from exc
    summary = {"out": str(out), "samples": len(samples), "num_landmarks": scene.num_landmarks}
    if samples:
        covs = np.stack([s.true_cov_array() for s in samples])
        summary["mean_true_covariance"] = np.round(covs.mean(axis=0), 6).tolist()
    _emit(summary)
    return EXIT_OK


def _train_configs(args):
    from .network import ModelConfig
    from .training import TrainConfig

    raw = _load_json(args.config, "train_config.schema.json") if args.config else {}
    train_d = dict(raw.get("train", {}))
    for flag, key in (("steps", "steps"), ("seed", "seed"), ("lr", "learning_rate"), ("alpha", "alpha")):
        if getattr(args, flag) is not None:
            train_d[key] = getattr(args, flag)
    if args.baseline:
        train_d["baseline"] = args.baseline
    try:
        return ModelConfig.from_dict(raw.get("model", {})), TrainConfig.from_dict(train_d)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"train config: {exc}") from exc


def cmd_train(args) -> int:
    from dataclasses import replace

    from .training import DivergenceError, train

    model_cfg, train_cfg = _train_configs(args)
    dataset = _read_dataset(args.data)
    if len(dataset) == 0:
        raise CliError(EXIT_CONFIG, f"{args.data}: dataset is empty")
    # the dataset fixes the geometry
    model_cfg = replace(model_cfg, input_size=tuple(dataset.image_size), num_landmarks=dataset.num_landmarks)
    out = _writable_dir(args.out)
    try:
        _, tlog = train(dataset, model_cfg, train_cfg, out_dir=out)
    except DivergenceError as exc:
        raise CliError(EXIT_DIVERGED, f"training diverged: {exc}") from exc
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    losses = tlog.losses
    _emit({
        "steps": len(losses),
        "initial_loss": losses[0] if losses else None,
        "final_loss": losses[-1] if losses else None,
        "checkpoints": [str(p) for p in tlog.checkpoints],
        "final_checkpoint": str(tlog.checkpoints[-1]),
        "log": str(out / "train_log.csv"),
    })
    return EXIT_OK


def _activation_of(extra: dict):
    from .heatmap import Activation

    return Activation(extra.get("train", {}).get("activation", Activation.EXP_SOFTMAX.value))


def cmd_eval(args) -> int:
    from .evaluation import evaluate, write_overlays

    params, cfg, extra = _load_checkpoint(args.ckpt)
    dataset = _read_dataset(args.data)
    _check_compatible(cfg, dataset)
    if len(dataset) == 0:
        raise CliError(EXIT_CONFIG, f"{args.data}: dataset is empty")
    report, predictions = evaluate(params, cfg, dataset, _activation_of(extra))
    out = Path(args.out)
    pred_path = out.with_name(out.stem + ".predictions.json")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json())
        pred_path.write_text(json.dumps({
            "pixel_spacing_mm": dataset.pixel_spacing_mm,
            "predictions": np.asarray(predictions["preds"]).tolist(),
            "ground_truth": dataset.landmarks().tolist(),
            "covariances": np.asarray(predictions["covariances"]).tolist(),
        }, sort_keys=True) + "\n")
        if args.svg:
            write_overlays(args.svg, dataset, predictions, report)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write outputs: {exc}") from exc
    _emit({"report": str(out), "predictions": str(pred_path), "mre_mm": report.mre_mm,
           "mre_px": report.mre_px, "sdr": report.to_dict()["sdr"]})
    return EXIT_OK


def _load_single_sample(path, index: int):
    from .data import Dataset, Sample, _parse_rows
    from .pgm import PGMFormatError, read_pgm

    path = Path(path)
    if path.is_dir():
        dataset = _read_dataset(path)
        if not 0 <= index < len(dataset):
            raise CliError(EXIT_CONFIG, f"--index {index} outside dataset of {len(dataset)} samples")
        return dataset.samples[index]
    try:
        image = read_pgm(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"{path}: {exc.strerror}") from exc
    except PGMFormatError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    gt_path = path.parent.parent / "landmarks" / (path.stem + ".csv")
    gt = None
    if gt_path.exists():
        rows = gt_path.read_text().strip().splitlines()
        gt = _parse_rows(gt_path, ["x", "y"], len(rows) - 1)
    return Sample(image=image, gt_landmarks=gt, annotation=gt)


def cmd_render(args) -> int:
    import torch

    from .covariance import Covariance2x2, ellipse_from_covariance
    from .evaluation import covariances_from_raw, overlay_svg, predict
    from .heatmap import activate
    from .network import model_forward
    from .pgm import write_pgm_normalized

    params, cfg, extra = _load_checkpoint(args.ckpt)
    sample = _load_single_sample(args.sample, args.index)
    if sample.image.shape != tuple(cfg.input_size):
        raise CliError(EXIT_SHAPE, f"image {sample.image.shape} does not match checkpoint {tuple(cfg.input_size)}")
    if sample.gt_landmarks is not None and len(sample.gt_landmarks) != cfg.num_landmarks:
        raise CliError(EXIT_SHAPE, "landmark count does not match checkpoint")
    activation = _activation_of(extra)
    preds, raws = predict(params, cfg, sample.image[None], activation)
    covs = covariances_from_raw(raws, cfg.positivity_mode)[0]
    with torch.no_grad():
        heat = model_forward(torch.from_numpy(sample.image[None]).to(next(iter(params.values())).dtype),
                             params, cfg).heatmaps[0].to(torch.float64).numpy()
    out = _writable_dir(args.out)
    gt = sample.gt_landmarks if sample.gt_landmarks is not None else preds[0]
    ellipses = []
    try:
        for i in range(cfg.num_landmarks):
            act, _ = activate(heat[i], activation)
            write_pgm_normalized(out / f"heatmap_{i:02d}.pgm", act)
            e = ellipse_from_covariance(Covariance2x2(*covs[i]), preds[0][i], 2.0)
            ellipses.append({"landmark": i, "center": list(e.center), "semi_major": e.semi_major,
                             "semi_minor": e.semi_minor, "angle": e.angle})
        true = sample.true_cov_array()
        (out / "overlay.svg").write_text(overlay_svg(sample.image, gt, preds[0], covs, None, true, 2.0))
    except OSError as exc:
        raise CliError(EXIT_IO, f"{out}: {exc}") from exc
    _emit({"out": str(out), "predictions": preds[0].tolist(), "ellipses": ellipses})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_audits

    if args.trials < 0:
        raise CliError(EXIT_CONFIG, "--trials must be non-negative")
    if args.trials == 0:
        print("warning: --trials 0 runs no audits; passing vacuously", file=sys.stderr)
    results = run_audits(args.seed, args.trials, perturb=args.perturb_gradient)
    ok = True
    for r in results:
        ok &= r.passed
        print(f"{r.name:12s} trials={r.trials:5d} max_rel_error={r.max_rel_error:.3e} "
              f"threshold={r.threshold:.0e} skipped_kinks={r.skipped_kinks} {'PASS' if r.passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_AUDIT


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aniso-landmark", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", help="scene config JSON (defaults apply when omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON with optional 'model' and 'train' sections")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--baseline", choices=["mse-fixed-sigma"])
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--alpha", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--svg", help="directory for per-image ellipse overlays")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="write predicted heatmaps and an ellipse overlay for one sample")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--sample", required=True, help="dataset directory or a PGM inside its images/ folder")
    r.add_argument("--index", type=int, default=0, help="sample index when --sample is a directory")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    g = sub.add_parser("gradcheck", help="finite-difference audit of all analytic gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--trials", type=int, default=1000)
    g.add_argument("--perturb-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
