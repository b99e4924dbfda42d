"""``reenact`` command-line entry point.

Every subcommand writes into a fresh output directory whose first file is
``run_config.json`` (resolved configuration plus seed). Settings resolve as
flags > ``--config`` JSON file > built-in defaults. Exit codes: 0 success,
1 usage or configuration error, 2 numerical failure.

The JSON config file may hold the sections ``synth``, ``backbone``,
``preprocess`` and ``train``; ``--set section.key=value`` overrides single
entries.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager, nullcontext
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluate import (
    ablate_streams,
    cam,
    cam_region_ratio,
    cross_compression_matrix,
    evaluate,
    fusion_ablation,
    lambda_sweep,
    save_cam_png,
    stream_scores,
    write_matrix_csv,
    write_metrics_csv,
    write_roc_csv,
    write_rows_csv,
)
from .metrics import MetricError
from .model import BackboneConfig, ConfigError, build_model
from .preprocess import PreprocessConfig
from .synth import ManifestError, SynthConfig, artifact_masks_for, gen_dataset, load_dataset, split_samples, write_dataset
from .tensor import NumericalError
from .train import RegionData, TrainConfig, build_region_data, train

log = logging.getLogger("reenact")

SNAPSHOT = "run_config.json"
SECTIONS = ("synth", "backbone", "preprocess", "train")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- configuration ---------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def resolve_config(args: argparse.Namespace) -> dict[str, dict]:
    """Merge defaults, the JSON file and flags (in increasing priority)."""
    cfg: dict[str, dict] = {s: {} for s in SECTIONS}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except ValueError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        unknown = set(loaded) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)} in {path}")
        for s in SECTIONS:
            cfg[s].update(loaded.get(s, {}))
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        section, dot, field_name = key.partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise ConfigError(f"--set expects section.key=value with section in {SECTIONS}, got {item!r}")
        cfg[section][field_name] = _parse_value(value)
    flag_map = {
        "seed": [("synth", "seed"), ("train", "seed")],
        "qp": [("train", "qp")],
        "epochs": [("train", "epochs")],
        "lr": [("train", "base_lr")],
        "lam": [("train", "lam")],
        "batch_size": [("train", "batch_size")],
        "objective": [("train", "objective")],
        "n_videos": [("synth", "n_videos")],
        "variant": [("backbone", "variant")],
    }
    for flag, targets in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            for section, name in targets:
                cfg[section][name] = v
    return cfg


def _build_configs(cfg: dict[str, dict]):
    try:
        b = dict(cfg["backbone"])
        variant = b.pop("variant", "desk")
        if variant == "paper":
            backbone = BackboneConfig.paper()
        elif variant == "desk":
            backbone = BackboneConfig.desk(**b) if b else BackboneConfig()
        else:
            raise ConfigError(f"unknown backbone variant {variant!r}")
        pre = dict(cfg["preprocess"])
        pre.setdefault("resolution", backbone.resolution)
        if "mean" in pre:
            pre["mean"] = tuple(pre["mean"])
        if "std" in pre:
            pre["std"] = tuple(pre["std"])
        synth = SynthConfig.from_dict(cfg["synth"])
        tc = TrainConfig.from_dict(cfg["train"])
        pc = PreprocessConfig(**pre)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    if pc.resolution != backbone.resolution:
        raise ConfigError(f"preprocess resolution {pc.resolution} differs from backbone resolution {backbone.resolution}")
    return synth, backbone, pc, tc


# -- output directory ------------------------------------------------------

@contextmanager
def output_dir(path: str | Path, force: bool):
    """Build outputs in a sibling temp dir and move them into place on success."""
    final = Path(path)
    if final.exists() and (not final.is_dir() or any(final.iterdir())) and not force:
        raise ConfigError(f"output directory {final} exists and is not empty (use --force)")
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=final.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if final.exists():
        shutil.rmtree(final) if final.is_dir() else final.unlink()
    os.replace(tmp, final)


def _write_snapshot(out: Path, args: argparse.Namespace, cfg: dict[str, dict], seed: int) -> None:
    synth, backbone, pc, tc = _build_configs(cfg)
    snap = {
        "command": args.command,
        "argv": sys.argv[1:],
        "version": __version__,
        "seed": seed,
        "synth": synth.to_dict(),
        "backbone": backbone.to_dict(),
        "preprocess": asdict(pc),
        "train": tc.to_dict(),
        "inputs": {k: v for k, v in vars(args).items() if k in ("data", "checkpoint", "checkpoints", "proposed", "split")},
    }
    (out / SNAPSHOT).write_text(json.dumps(snap, indent=1, default=str))


# -- data ------------------------------------------------------------------

def _corpus_root(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"data path not found: {path}")
    return path


def load_split(data: str | Path, split: str, qp: int, pc: PreprocessConfig, with_masks: bool = False) -> RegionData:
    """Region data for one split, from a preprocessed dir or a raw corpus."""
    root = _corpus_root(Path(data))
    cached = root / f"regions_{split}.npz"
    if cached.exists():
        meta = json.loads((root / "preprocess.json").read_text())
        if int(meta["qp"]) != int(qp):
            raise ConfigError(f"{root} was preprocessed at qp={meta['qp']}, requested qp={qp}")
        with np.load(cached, allow_pickle=False) as z:
            masks = z["masks"] if "masks" in z.files else None
            return RegionData(z["regions"], z["labels"], list(z["video_ids"]), masks)
    samples = split_samples(load_dataset(root), split)
    if not samples:
        raise ManifestError(f"split {split!r} is empty in {root}")
    synth_cfg = root / "config.json"
    if with_masks and synth_cfg.exists() and any(s.mask is None for s in samples):
        # synthetic corpora store no masks; they are a pure function of the generator config
        masks = artifact_masks_for(SynthConfig.from_dict(json.loads(synth_cfg.read_text())), samples)
        samples = [replace(s, mask=m) for s, m in zip(samples, masks)]
    return build_region_data(samples, qp, pc, with_masks=with_masks)


def _model_from(path: str, backbone: BackboneConfig | None):
    return load_checkpoint(path, backbone)


# -- subcommands -----------------------------------------------------------

def cmd_gen_data(args, cfg, out: Path) -> None:
    synth, *_ = _build_configs(cfg)
    t0 = time.perf_counter()
    samples = gen_dataset(synth)
    write_dataset(samples, out, synth)
    log.info("wrote %d frames from %d videos in %.1fs", len(samples), synth.n_videos, time.perf_counter() - t0)


def cmd_preprocess(args, cfg, out: Path) -> None:
    _, _, pc, tc = _build_configs(cfg)
    for split in args.splits:
        d = load_split(args.data, split, tc.qp, pc, with_masks=True)
        arrays = {"regions": d.regions, "labels": d.labels, "video_ids": np.array(d.video_ids)}
        if d.masks is not None:
            arrays["masks"] = d.masks
        np.savez(out / f"regions_{split}.npz", **arrays)
        log.info("%s: %d region sets", split, len(d))
    (out / "preprocess.json").write_text(json.dumps({"qp": tc.qp, "splits": list(args.splits)}))


def cmd_train(args, cfg, out: Path) -> None:
    _, backbone, pc, tc = _build_configs(cfg)
    tr = load_split(args.data, "train", tc.qp, pc)
    va = load_split(args.data, "val", tc.qp, pc)
    model = build_model(backbone, tc.seed)
    res = train(model, tr, va, tc, log_path=out / "loss_log.csv")
    res.history.write_csv(out / "history.csv")
    save_checkpoint(res.model, out / "checkpoint", extra={"epoch": res.best_epoch, "val_balanced_accuracy": res.best_val, "qp": tc.qp})
    log.info("best epoch %s, validation balanced accuracy %s", res.best_epoch, res.best_val)


def _backbone_arg(args, cfg):
    # a checkpoint carries its own config; only check it when one was given explicitly
    given = bool(cfg["backbone"])
    return _build_configs(cfg)[1] if given else None


def cmd_eval(args, cfg, out: Path) -> None:
    _, _, pc, tc = _build_configs(cfg)
    model = _model_from(args.checkpoint, _backbone_arg(args, cfg))
    data = load_split(args.data, args.split, tc.qp, pc)
    rep = evaluate(model, data)
    write_metrics_csv(rep, out / "metrics.csv", {"split": args.split, "qp": tc.qp})
    write_roc_csv(rep, out / "roc.csv")
    log.info("balanced accuracy %.4f, AUC %.4f", rep.balanced_accuracy, rep.auc)


def cmd_roc(args, cfg, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    _, _, pc, tc = _build_configs(cfg)
    model = _model_from(args.checkpoint, _backbone_arg(args, cfg))
    rep = evaluate(model, load_split(args.data, args.split, tc.qp, pc))
    write_roc_csv(rep, out / "roc.csv")
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(rep.fpr, rep.tpr, label=f"qp={tc.qp} (AUC {rep.auc:.3f})")
    ax.plot([0, 1], [0, 1], "k:", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(out / "roc.png", dpi=120)
    plt.close(fig)


def _parse_checkpoint_specs(specs) -> dict[int, str]:
    res = {}
    for s in specs:
        qp, sep, path = s.partition("=")
        if not sep:
            raise ConfigError(f"--checkpoints entries look like QP=PATH, got {s!r}")
        try:
            res[int(qp)] = path
        except ValueError:
            raise ConfigError(f"bad qp in {s!r}") from None
    return res


def cmd_cross_eval(args, cfg, out: Path) -> None:
    _, backbone, pc, _ = _build_configs(cfg)
    paths = _parse_checkpoint_specs(args.checkpoints)
    given = _backbone_arg(args, cfg)
    models = {qp: _model_from(p, given) for qp, p in paths.items()}
    levels = args.levels or sorted(paths)
    tests = {qp: load_split(args.data, args.split, qp, pc) for qp in levels}
    rows, cols, mat = cross_compression_matrix(models, tests)
    write_matrix_csv(rows, cols, mat, out / "cross_compression.csv")


def cmd_ablate(args, cfg, out: Path) -> None:
    _, _, pc, tc = _build_configs(cfg)
    model = _model_from(args.checkpoint, _backbone_arg(args, cfg))
    fit = load_split(args.data, "val", tc.qp, pc)
    test = load_split(args.data, args.split, tc.qp, pc)
    write_rows_csv(ablate_streams(model, fit, test), out / "stream_ablation.csv")


def cmd_fusion_ablate(args, cfg, out: Path) -> None:
    _, _, pc, tc = _build_configs(cfg)
    given = _backbone_arg(args, cfg)
    scores_model = _model_from(args.checkpoint, given)
    fit = load_split(args.data, "val", tc.qp, pc)
    test = load_split(args.data, args.split, tc.qp, pc)
    proposed = None
    if args.proposed:
        proposed = evaluate(_model_from(args.proposed, given), test).balanced_accuracy
    rows = fusion_ablation(stream_scores(scores_model, fit), fit.labels, stream_scores(scores_model, test), test.labels, proposed)
    write_rows_csv(rows, out / "fusion_ablation.csv")


def cmd_cam(args, cfg, out: Path) -> None:
    _, _, pc, tc = _build_configs(cfg)
    model = _model_from(args.checkpoint, _backbone_arg(args, cfg))
    data = load_split(args.data, args.split, tc.qp, pc, with_masks=True)
    idx = np.flatnonzero(data.labels == args.label)[: args.count]
    rows = []
    for i in idx:
        heat = cam(model, data.regions[i], args.stream, args.cls)
        name = f"cam_s{args.stream}_c{args.cls}_{i:05d}.png"
        save_cam_png(heat, out / name)
        row = {"index": int(i), "file": name, "label": int(data.labels[i])}
        if data.masks is not None and args.stream == 1 and 0 < data.masks[i].sum() < data.masks[i].size:
            m = data.masks[i] > 0.5
            row.update(mean_inside=float(heat.upsampled[m].mean()), mean_outside=float(heat.upsampled[~m].mean()),
                       ratio=cam_region_ratio(heat.upsampled, data.masks[i]))
        rows.append(row)
    write_rows_csv(rows, out / "cam.csv")


def cmd_lambda_sweep(args, cfg, out: Path) -> None:
    _, backbone, pc, tc = _build_configs(cfg)
    tr = load_split(args.data, "train", tc.qp, pc)
    va = load_split(args.data, "val", tc.qp, pc)
    te = load_split(args.data, args.split, tc.qp, pc)
    rows = lambda_sweep(tr, va, te, args.lambdas, tc, backbone, tc.seed)
    write_rows_csv(rows, out / "lambda_sweep.csv")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "cross-eval": cmd_cross_eval,
    "ablate": cmd_ablate,
    "fusion-ablate": cmd_fusion_ablate,
    "cam": cmd_cam,
    "roc": cmd_roc,
    "lambda-sweep": cmd_lambda_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="reenact", description="Multi-stream reenactment detector: data, training and evaluation.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True, split=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", required=True, help="output directory (must be new or empty)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--force", action="store_true", help="replace a non-empty output directory")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
        sp.add_argument("--variant", choices=("desk", "paper"))
        if data:
            sp.add_argument("--data", required=True, help="corpus directory or preprocessed directory")
            sp.add_argument("--qp", type=int, help="compression level (0 none, 23 easy, 40 hard)")
        if split:
            sp.add_argument("--split", default="test", choices=("train", "val", "test"))

    sp = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(sp, data=False, split=False)
    sp.add_argument("--n-videos", type=int)

    sp = sub.add_parser("preprocess", help="crop, degrade and split frames into region arrays")
    common(sp, split=False)
    sp.add_argument("--splits", nargs="+", default=["train", "val", "test"])

    sp = sub.add_parser("train", help="train the five-stream model")
    common(sp, split=False)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--lam", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--objective", choices=("balanced", "fusion_only"))

    for name, helptext in (("eval", "metrics and ROC points"), ("roc", "ROC points and plot"), ("ablate", "per-stream and face+region accuracy")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("cross-eval", help="train-level x test-level accuracy matrix")
    common(sp)
    sp.add_argument("--checkpoints", nargs="+", required=True, metavar="QP=PATH")
    sp.add_argument("--levels", nargs="+", type=int)

    sp = sub.add_parser("fusion-ablate", help="frozen-score linear fusion versus the end-to-end model")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="model supplying frozen stream scores")
    sp.add_argument("--proposed", help="end-to-end model for the comparison row")

    sp = sub.add_parser("cam", help="class activation map overlays")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--stream", type=int, default=1, choices=range(1, 6))
    sp.add_argument("--cls", type=int, default=1, choices=(0, 1))
    sp.add_argument("--label", type=int, default=1, choices=(0, 1), help="which samples to visualize")
    sp.add_argument("--count", type=int, default=8)

    sp = sub.add_parser("lambda-sweep", help="one model per fusion weight")
    common(sp)
    sp.add_argument("--lambdas", nargs="+", type=float, default=[0.001, 1.0, 100.0])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    return p


def _thread_limit():
    n = os.environ.get("REENACT_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(limits=max(1, int(n)))
    except ValueError:
        raise ConfigError(f"REENACT_THREADS must be an integer, got {n!r}") from None


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"reenact: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        seed = _build_configs(cfg)[3].seed
        with _thread_limit(), output_dir(args.out, args.force) as out:
            _write_snapshot(out, args, cfg, seed)
            COMMANDS[args.command](args, cfg, out)
    except NumericalError as exc:
        print(f"reenact: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, ManifestError, MetricError, UsageError, ValueError) as exc:
        print(f"reenact: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"reenact: I/O error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
