"""Command-line pipeline: synth-data, split, pretrain, probe, finetune, predict, evaluate, curves.

Every command writes its artifacts plus ``provenance.json`` into ``--out``.
Failures print a single line ``cxrssl: error: <kind>: <message>`` to stderr
and exit nonzero (2 for usage/config problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("cxrssl")

EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest_input(path, manifest) -> dict:
    h = hashlib.sha256()
    for r in manifest.records:
        p = manifest.resolve(r)
        if p.exists():
            h.update(_sha256(p).encode())
    return {"path": str(Path(path).resolve()), "sha256": _sha256(path),
            "records_sha256": manifest.digest(), "images_sha256": h.hexdigest()}


def _file_input(path) -> dict:
    return {"path": str(Path(path).resolve()), "sha256": _sha256(path)}


def _write_provenance(out: Path, command: str, cfg, inputs: dict, outputs: list[str]) -> None:
    record = {
        "command": command,
        "tool_version": __version__,
        "config": cfg.resolved(),
        "inputs": inputs,
        "outputs": sorted(outputs),
    }
    (out / "provenance.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# -- commands ---------------------------------------------------------------


def cmd_synth_data(args, cfg, out):
    from .data import ADULT, PEDIATRIC, synth_generate

    styles = {"adult": ADULT, "pediatric": PEDIATRIC}
    d = cfg.section("data")
    if d["style"] not in styles:
        raise ValueError(f"data.style must be one of {sorted(styles)}, got {d['style']!r}")
    manifest, _ = synth_generate(d["n_images"], d["positive_fraction"], d["image_size"], d["seed"],
                                 out_dir=out, style=styles[d["style"]], id_prefix=d["id_prefix"],
                                 single_image_patients=d["single_image_patients"])
    print(f"wrote {len(manifest)} images to {out}")
    return {}, ["manifest.csv", "manifest.meta.json", "images/"]


def cmd_split(args, cfg, out):
    from .data import load_manifest, save_manifest, stratified_split

    m = load_manifest(args.manifest)
    d = cfg.section("data")
    keys = [k.strip() for k in d["strat_keys"].split(",") if k.strip()]
    train, test, report = stratified_split(m, d["train_fraction"], keys, d["seed"],
                                           return_report=True)
    save_manifest(train, out / "train.csv")
    save_manifest(test, out / "test.csv")
    strata = [{"key": list(r.key), "n_patients": r.n_patients,
               "n_train_patients": r.n_train_patients, "n_images": r.n_images,
               "n_train_images": r.n_train_images} for r in report]
    (out / "split_report.json").write_text(json.dumps(
        {"n_train": len(train), "n_test": len(test), "strata": strata}, indent=2) + "\n")
    print(f"train {len(train)} / test {len(test)} images")
    return ({"manifest": _manifest_input(args.manifest, m)},
            ["train.csv", "train.meta.json", "test.csv", "test.meta.json", "split_report.json"])


def _load_checkpoint(path):
    from .train import Checkpoint

    return Checkpoint.load(path)


def _images_for(manifest, model_cfg):
    from .data import load_images

    gone = manifest.missing_files()
    if gone:
        raise FileNotFoundError(f"{len(gone)} image file(s) missing, first: {gone[0]}")
    return load_images(manifest, model_cfg.image_size, model_cfg.channels)


def cmd_pretrain(args, cfg, out):
    from .data import load_manifest
    from .train import TrainingDivergedError, pretrain

    m = load_manifest(args.manifest)
    model_cfg = cfg.model_config()
    images = _images_for(m, model_cfg)
    tcfg = cfg.train_config("pretrain")
    try:
        ckpt = pretrain(images, model_cfg, cfg.ssl_config(), tcfg, log_path=out / "train_log.csv",
                        out_dir=out, checkpoint_every=args.checkpoint_every,
                        data_digest=m.digest())
    except TrainingDivergedError:
        _write_provenance(out, "pretrain", cfg, {"manifest": _manifest_input(args.manifest, m)},
                          ["last_good.ckpt", "train_log.csv"])
        raise
    ckpt.save(out / "checkpoint.ckpt")
    print(f"saved {out / 'checkpoint.ckpt'}")
    return {"manifest": _manifest_input(args.manifest, m)}, ["checkpoint.ckpt", "train_log.csv"]


def _downstream(args, cfg, out, phase):
    from .data import load_manifest
    from .train import finetune, model_config, probe

    ckpt = _load_checkpoint(args.checkpoint)
    m = load_manifest(args.manifest).labeled()
    if not m.records:
        raise ValueError(f"{args.manifest} has no labeled records")
    images = _images_for(m, model_config(ckpt))
    fn = probe if phase == "probe" else finetune
    result = fn(ckpt, images, m.labels(), cfg.train_config(phase),
                log_path=out / "train_log.csv", data_digest=m.digest())
    result.save(out / "checkpoint.ckpt")
    print(f"saved {out / 'checkpoint.ckpt'}")
    return ({"checkpoint": _file_input(args.checkpoint),
             "manifest": _manifest_input(args.manifest, m)}, ["checkpoint.ckpt", "train_log.csv"])


def cmd_probe(args, cfg, out):
    return _downstream(args, cfg, out, "probe")


def cmd_finetune(args, cfg, out):
    return _downstream(args, cfg, out, "finetune")


def _predict(args):
    from .data import load_manifest
    from .eval import predict

    ckpt = _load_checkpoint(args.checkpoint)
    m = load_manifest(args.manifest)
    gone = m.missing_files()
    if gone:
        raise FileNotFoundError(f"{len(gone)} image file(s) missing, first: {gone[0]}")
    inputs = {"checkpoint": _file_input(args.checkpoint),
              "manifest": _manifest_input(args.manifest, m)}
    return predict(ckpt, m), inputs


def cmd_predict(args, cfg, out):
    preds, inputs = _predict(args)
    preds.save(out / "predictions.csv")
    print(f"scored {len(preds)} images")
    return inputs, ["predictions.csv"]


def cmd_evaluate(args, cfg, out):
    from .eval import PredictionSet, build_report

    e = cfg.section("eval")
    outputs = ["report.json"]
    if args.predictions:
        if args.checkpoint or args.manifest:
            raise UsageError("give either --predictions or --checkpoint with --manifest")
        preds = PredictionSet.load(args.predictions)
        inputs = {"predictions": _file_input(args.predictions)}
    else:
        if not (args.checkpoint and args.manifest):
            raise UsageError("evaluate needs --predictions or both --checkpoint and --manifest")
        preds, inputs = _predict(args)
        preds.save(out / "predictions.csv")
        outputs.append("predictions.csv")
    report = build_report(preds.labels, preds.scores, e["threshold"], e["n_boot"], e["seed"],
                          e["alpha"])
    report.save(out / "report.json")
    print("ACC (95% CI) | AUPR (95% CI) | AUC (95% CI) | TPR | TNR")
    print(report.row())
    return inputs, outputs


def cmd_curves(args, cfg, out):
    from .eval import PredictionSet, write_curves

    preds = PredictionSet.load(args.predictions)
    files = write_curves(preds.labels, preds.scores, out)
    return {"predictions": _file_input(args.predictions)}, sorted(files.values())


COMMANDS = {
    "synth-data": (cmd_synth_data, "generate a synthetic radiograph cohort and its manifest"),
    "split": (cmd_split, "patient-disjoint stratified train/test split of a manifest"),
    "pretrain": (cmd_pretrain, "self-supervised pre-training on manifest images"),
    "probe": (cmd_probe, "train a linear head on a frozen backbone"),
    "finetune": (cmd_finetune, "train the backbone and head end to end"),
    "predict": (cmd_predict, "score a labeled manifest with a headed checkpoint"),
    "evaluate": (cmd_evaluate, "metric report with confidence intervals"),
    "curves": (cmd_curves, "export ROC and PR curve points as CSV"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cxrssl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cxrssl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", type=Path, help="TOML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="sets train.seed, data.seed and eval.seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("split", "pretrain", "probe", "finetune", "predict"):
            p.add_argument("--manifest", type=Path, required=True)
        if name in ("probe", "finetune", "predict"):
            p.add_argument("--checkpoint", type=Path, required=True)
        if name == "pretrain":
            p.add_argument("--checkpoint-every", type=int, default=0, metavar="EPOCHS",
                           help="also keep a checkpoint every N epochs")
        if name == "evaluate":
            p.add_argument("--predictions", type=Path)
            p.add_argument("--checkpoint", type=Path)
            p.add_argument("--manifest", type=Path)
        if name == "curves":
            p.add_argument("--predictions", type=Path, required=True)
    return parser


def _fail(kind: str, exc, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"cxrssl: error: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    from .config import ConfigError, RunConfig

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    import torch

    # single worker unless asked otherwise, so reruns are bit-identical
    torch.set_num_threads(int(os.environ.get("CXRSSL_NUM_THREADS", "1")))

    from .backbone import MissingHeadError
    from .data import ManifestError
    from .eval import EvaluationError
    from .train import CheckpointError, TrainingDivergedError

    try:
        cfg = RunConfig.load(args.config, args.set)
        if args.seed is not None:
            for key in ("train.seed", "data.seed", "eval.seed"):
                cfg.set(key, args.seed)
        cfg.resolved()
        args.out.mkdir(parents=True, exist_ok=True)
        inputs, outputs = COMMANDS[args.command][0](args, cfg, args.out)
        _write_provenance(args.out, args.command, cfg, inputs, outputs)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_USAGE)
    except CheckpointError as exc:
        return _fail("checkpoint", exc, EXIT_FAILURE)
    except ManifestError as exc:
        return _fail("manifest", exc, EXIT_FAILURE)
    except (MissingHeadError, EvaluationError) as exc:
        return _fail("evaluation", exc, EXIT_FAILURE)
    except TrainingDivergedError as exc:
        return _fail("diverged", exc, EXIT_FAILURE)
    except FileNotFoundError as exc:
        return _fail("missing-input", exc, EXIT_FAILURE)
    except (ValueError, OSError) as exc:
        return _fail("invalid-input", exc, EXIT_FAILURE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
