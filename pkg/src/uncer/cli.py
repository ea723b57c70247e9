"""Command-line entry point.

Subcommands: gen, train, eval, gridsearch, augtrain, attribute. Each takes
``--config PATH --seed N --out DIR`` and writes its outputs plus a
``manifest.json`` (inputs with hashes, config hash, seed) under DIR.
Exit status: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .attribution import bci_iv_2a_layout, channel_influence, circle_layout, export_topography, read_layout
from .augment import CorruptionOp, corrupt_set, train_uncer
from .config import ExperimentConfig, load_config
from .datasets import read_dataset, segment, split, synth_generate, write_dataset
from .decoder import DecoderModel, build_decoder, train
from .io import FormatError, dump_report
from .metrics import EvalBatch, corruption_error, metric_report, reliability_table
from .rng import RngStream
from .uncertainty import (VAR_FLOOR, UncertaintyConfig, estimate, gridsearch_dropout,
                          gridsearch_input_noise)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, cfg: ExperimentConfig, seed: int, inputs: dict) -> None:
    outputs = sorted(p.name for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "seed": seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_text(),
        "inputs": {role: {"path": str(p), "sha256": _sha256(p)} for role, p in sorted(inputs.items())},
        "outputs": {name: _sha256(out / name) for name in outputs},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _uncertainty_config(cfg: ExperimentConfig, seed: int, **changes) -> UncertaintyConfig:
    u = cfg.uncertainty
    base = UncertaintyConfig(n_passes=u.n_passes, phi=u.phi, input_noise=u.u, seed=seed, covariance=u.covariance)
    return base.replace(**changes) if changes else base


def _splits(cfg: ExperimentConfig, data_path, seed: int):
    trials = read_dataset(data_path)
    d = cfg.data
    segs = segment(trials, d.window, d.stride)
    return split(segs, d.split, d.holdout_subject if d.split == "cross" else None, d.fraction,
                 RngStream(seed).child("split"))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args, cfg: ExperimentConfig, out: Path) -> dict:
    d = cfg.data
    trials = synth_generate(d.n_subjects, d.trials_per_subject, d.n_channels, d.n_samples, d.n_classes, d.u_true,
                            RngStream(args.seed).child("data"), sample_rate=d.sample_rate,
                            signal_channels=d.signal_channels, class_amplitude=d.class_amplitude,
                            mixing_strength=d.mixing_strength, background=d.background)
    write_dataset(trials, out / "dataset.ueeg")
    return {}


def cmd_train(args, cfg: ExperimentConfig, out: Path) -> dict:
    tr, te = _splits(cfg, args.data, args.seed)
    root = RngStream(args.seed)
    model = build_decoder(cfg.decoder_config(tr.segments.shape[1], tr.segments.shape[2], tr.n_classes),
                          root.child("init"))
    t = cfg.train
    model, hist = train(model, tr, te, t.epochs, t.lr, t.batch_size, root.child("train"))
    model.save(out / "model.ckpt")
    dump_report({"train_loss": hist.train_loss, "train_acc": hist.train_acc, "val_loss": hist.val_loss,
                 "val_acc": hist.val_acc}, out / "history.json")
    return {"data": args.data}


def cmd_augtrain(args, cfg: ExperimentConfig, out: Path) -> dict:
    tr, te = _splits(cfg, args.data, args.seed)
    root = RngStream(args.seed)
    model = build_decoder(cfg.decoder_config(tr.segments.shape[1], tr.segments.shape[2], tr.n_classes),
                          root.child("init"))
    a = cfg.augment
    model, ctrl, hist = train_uncer(model, None, tr, a.augment_config(), a.epochs, root.child("augtrain"),
                                    batch_size=cfg.train.batch_size, variant=a.variant)
    model.save(out / "model.ckpt")
    ctrl.save(out / "controller.ckpt")
    dump_report({"train_loss": hist.train_loss, "meta_loss": hist.meta_loss, "mix_m": hist.mix_m,
                 "mix_w": hist.mix_w}, out / "history.json")
    return {"data": args.data}


def _eval_batch(model, x, y, ucfg):
    rep = estimate(model, x, ucfg, y)
    rows = np.arange(len(y))
    var = np.maximum(rep.probability_variance()[rows, y], VAR_FLOOR)
    return rep, EvalBatch(rep.predictive_mean, y, var)


def cmd_eval(args, cfg: ExperimentConfig, out: Path) -> dict:
    _, te = _splits(cfg, args.data, args.seed)
    model = DecoderModel.load(args.model)
    model.eval()
    y = np.asarray(te.labels, dtype=np.int64)
    rep, batch = _eval_batch(model, te.segments, y, _uncertainty_config(cfg, args.seed))
    root = RngStream(args.seed)
    corrupted = {(k, s): corrupt_set(te, CorruptionOp(k, s), root.child("corrupt", k, s))
                 for k in cfg.eval.corruptions for s in cfg.eval.severities}
    ce = corruption_error(model, corrupted) if corrupted else None
    metrics = metric_report(batch, cfg.eval.n_bins, ce)
    metrics.dump(out / "metrics.json")
    rep.dump(out / "uncertainty.json")
    table = reliability_table(batch, cfg.eval.n_bins)
    _write_csv(out / "reliability.csv", ["lower", "upper", "count", "confidence", "accuracy"],
               [[repr(r["lower"]), repr(r["upper"]), r["count"], repr(float(r["confidence"])),
                 repr(float(r["accuracy"]))] for r in table])
    return {"data": args.data, "model": args.model}


def cmd_gridsearch(args, cfg: ExperimentConfig, out: Path) -> dict:
    _, val = _splits(cfg, args.data, args.seed)
    model = DecoderModel.load(args.model)
    model.eval()
    ucfg = _uncertainty_config(cfg, args.seed)
    u_best, u_table = gridsearch_input_noise(model, val, cfg.uncertainty.noise_grid, ucfg)
    _write_csv(out / "noise_grid.csv", ["u", "nll", "argmin"],
               [[repr(u), repr(v), int(u == u_best)] for u, v in u_table.items()])
    p_best, p_table = gridsearch_dropout(model, val, cfg.uncertainty.dropout_points, ucfg)
    _write_csv(out / "dropout_grid.csv", ["phi", "nll", "argmin"],
               [[repr(p), repr(v), int(p == p_best)] for p, v in p_table.items()])
    dump_report({"u_star": u_best, "phi_star": p_best}, out / "gridsearch.json")
    return {"data": args.data, "model": args.model}


def _layout(cfg: ExperimentConfig, n_channels: int):
    choice = cfg.attribution.layout
    if choice == "auto":
        return bci_iv_2a_layout() if n_channels == 22 else circle_layout(n_channels)
    if choice == "bci_iv_2a":
        return bci_iv_2a_layout()
    if choice == "circle":
        return circle_layout(n_channels)
    return read_layout(choice)


def cmd_attribute(args, cfg: ExperimentConfig, out: Path) -> dict:
    _, te = _splits(cfg, args.data, args.seed)
    model = DecoderModel.load(args.model)
    model.eval()
    a = cfg.attribution
    infl = channel_influence(model, te, _uncertainty_config(cfg, args.seed, n_passes=a.n_passes), a.runs)
    export_topography(infl, _layout(cfg, infl.n_channels), out / "topography.csv")
    dump_report({"delta_pred": infl.delta_pred, "delta_unc": infl.delta_unc, "runs": infl.runs},
                out / "influence.json")
    return {"data": args.data, "model": args.model}


COMMANDS = {
    "gen": (cmd_gen, "generate a synthetic dataset", ()),
    "train": (cmd_train, "train the decoder", ("data",)),
    "eval": (cmd_eval, "metrics and uncertainty report on the test split", ("data", "model")),
    "gridsearch": (cmd_gridsearch, "input-noise and dropout-rate grid search", ("data", "model")),
    "augtrain": (cmd_augtrain, "meta-learned augmentation training", ("data",)),
    "attribute": (cmd_attribute, "channel occlusion attribution", ("data", "model")),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uncer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text, needs) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--out", required=True, help="output directory")
        if "data" in needs:
            p.add_argument("--data", required=True, help="UEEG dataset file")
        if "model" in needs:
            p.add_argument("--model", required=True, help="decoder checkpoint")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs = COMMANDS[args.command][0](args, cfg, out)
        if args.config:
            inputs = dict(inputs, config=args.config)
        _write_manifest(out, args.command, cfg, args.seed, inputs)
    except (ValueError, FormatError, OSError, KeyError) as err:
        print(f"uncer {args.command}: error: {err}", file=sys.stderr)
        return 1
    return 0


run_cli = main

if __name__ == "__main__":
    sys.exit(main())
