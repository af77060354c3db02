"""Command-line entry point.

Subcommands: ``synth`` (generate a paired dataset), ``train`` (full training
loop), ``eval`` (PSNR/SSIM report over a pair directory), ``sr`` (single
image super-resolution), ``degrade`` (learned degradation preview with a
difference image), ``verify`` (built-in correctness suites).

Exit codes: 0 success, 1 validation error, 2 runtime failure. Every command
that produces files also writes a ``run_manifest.json`` next to them with
the resolved configuration, so any run can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__, dataio, image_ops, nets, trainer, verify
from . import tensor as T
from .dataio import DatasetError, PairDataset
from .image_ops import DegradationSpec, gaussian_kernel
from .nets import CheckpointError
from .tensor import ContractError, DimensionError, Tensor
from .trainer import Toggles, TrainConfig


class CLIError(ValueError):
    """Bad command-line usage or argument values."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def _write_manifest(out_dir, command, config, inputs, outputs, seed, started):
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "duration_seconds": time.monotonic() - started,
    }
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_synth(args):
    started = time.monotonic()
    if args.scale not in (1, 2, 3, 4):
        raise CLIError(f"--scale {args.scale} unsupported; choose one of 1, 2, 3, 4")
    size = 2 * int(np.ceil(2 * args.blur_sigma)) + 1
    spec = DegradationSpec(
        kernel=gaussian_kernel(size, args.blur_sigma),
        scale=args.scale,
        noise_sigma=args.noise_sigma,
        rng_seed=args.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    manifest = dataio.synth_dataset(args.n, args.hr_size, spec, args.seed, args.out)
    config = {
        "n": args.n, "hr_size": args.hr_size, "scale": args.scale,
        "blur_sigma": args.blur_sigma, "noise_sigma": args.noise_sigma,
        "seed": args.seed,
    }
    _write_manifest(args.out, "synth", config, [], [args.out], args.seed, started)
    print(f"wrote {args.n} pairs to {args.out} "
          f"(bicubic baseline {manifest['baseline_psnr']:.3f} dB)")
    return 0


def _load_train_config(args):
    values = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            values.update(json.load(fh))
    flag_map = {
        "scale": args.scale, "omega": args.omega, "beta": args.beta,
        "gamma": args.gamma, "n_modules": args.n_modules, "lr": args.lr,
        "batch": args.batch, "epochs": args.epochs, "lr_decay": args.lr_decay,
        "p": args.p, "seed": args.seed, "patch_size": args.patch_size,
    }
    for key, value in flag_map.items():
        if value is not None:
            values[key] = value
    if args.milestones is not None:
        values["milestones"] = [int(m) for m in args.milestones.split(",") if m]
    toggles = values.pop("toggles", {})
    if isinstance(toggles, dict):
        toggles = Toggles(**toggles)
    if args.no_kans:
        toggles.kans = False
    if args.no_hfso:
        toggles.hfso = False
    if args.no_is:
        toggles.iterative = False
    return TrainConfig(toggles=toggles, **values)


def cmd_train(args):
    started = time.monotonic()
    cfg = _load_train_config(args)
    dataset = PairDataset(args.data, cfg.scale)
    artifacts = trainer.train(
        dataset, cfg, out_dir=args.out, checkpoint_every=args.checkpoint_every
    )
    for row in artifacts.metric_rows:
        print(row)
    outputs = [p for p in (artifacts.checkpoint_path, artifacts.metrics_path) if p]
    _write_manifest(args.out, "train", cfg.to_dict(), [args.data], outputs,
                    cfg.seed, started)
    return 0


def _resolve_model(model_arg, scale):
    """A checkpoint path, or the literal stubs 'bicubic' / 'identity'."""
    if model_arg == "identity":
        return lambda lr: lr, None
    if model_arg == "bicubic":
        return lambda lr: image_ops.bicubic_resize(lr, scale), None
    loaded, cfg = nets.load_checkpoint(model_arg)
    eta = next((n for n in loaded if n.name == "sr"), None)
    if eta is None:
        raise CheckpointError(f"{model_arg}: no SR network stored")

    def run(lr):
        with T.no_grad():
            return np.clip(eta(Tensor(lr.astype(np.float32))).data, 0.0, 1.0)

    return run, cfg


def cmd_eval(args):
    started = time.monotonic()
    probe = PairDataset(args.data, args.scale) if args.scale else None
    if probe is None:
        # infer scale from the first pair
        probe = _infer_dataset(args.data)
    dataset = probe
    model, _ = _resolve_model(args.model, dataset.scale)
    os.makedirs(args.out, exist_ok=True)

    rows = []
    for stem, (lr, hr) in zip(dataset.stems, dataset):
        if args.self_ensemble:
            out = image_ops.self_ensemble(model, lr[None])
        else:
            out = np.asarray(model(lr[None]))
        out = np.clip(out, 0.0, 1.0)
        rows.append((stem, image_ops.psnr(out[0], hr), image_ops.ssim(out[0], hr)))
    mean_psnr = float(np.mean([r[1] for r in rows]))
    mean_ssim = float(np.mean([r[2] for r in rows]))

    report = os.path.join(args.out, "report.csv")
    with open(report, "w", encoding="utf-8") as fh:
        fh.write("name,psnr,ssim\n")
        for stem, p, s in rows:
            fh.write(f"{stem},{p:.6f},{s:.6f}\n")
        fh.write(f"mean,{mean_psnr:.6f},{mean_ssim:.6f}\n")
    config = {"model": args.model, "self_ensemble": args.self_ensemble,
              "scale": dataset.scale}
    _write_manifest(args.out, "eval", config, [args.data], [report], 0, started)
    print(f"mean psnr {mean_psnr:.3f} dB, mean ssim {mean_ssim:.4f} "
          f"over {len(rows)} pairs -> {report}")
    return 0


def _infer_dataset(root):
    for scale in (1, 2, 3, 4):
        try:
            return PairDataset(root, scale)
        except DatasetError:
            continue
    raise DatasetError(f"{root}: pairs do not match any supported scale")


def cmd_sr(args):
    started = time.monotonic()
    loaded, cfg = nets.load_checkpoint(args.model)
    eta = next((n for n in loaded if n.name == "sr"), None)
    if eta is None:
        raise CheckpointError(f"{args.model}: no SR network stored")
    lr = dataio.load_png(args.input)
    with T.no_grad():
        sr = eta(Tensor(lr)).data
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "sr.png")
    dataio.save_png(np.clip(sr, 0.0, 1.0), out_path)
    _write_manifest(args.out, "sr", {"model": args.model, "scale": eta.scale},
                    [args.input], [out_path], cfg.seed, started)
    print(f"{args.input} ({lr.shape[-2]}x{lr.shape[-1]}) -> {out_path} "
          f"({sr.shape[-2]}x{sr.shape[-1]})")
    return 0


def cmd_degrade(args):
    started = time.monotonic()
    loaded, cfg = nets.load_checkpoint(args.model)
    phi = next((n for n in loaded if n.name == "kans"), None)
    if phi is None:
        raise CheckpointError(f"{args.model}: no degradation network stored")
    hr = dataio.load_png(args.input)
    with T.no_grad():
        degraded = phi(Tensor(hr)).data
    # difference is computed on the emitted PNG grid so identical files
    # produce an exactly zero difference image
    degraded = dataio.quantize_bytes(degraded).astype(np.float32) / 255.0
    os.makedirs(args.out, exist_ok=True)
    out_deg = os.path.join(args.out, "degraded.png")
    dataio.save_png(degraded, out_deg)
    outputs = [out_deg]
    if args.ref:
        ref = dataio.load_png(args.ref)
        if ref.shape != degraded.shape:
            raise DimensionError(
                f"--ref {ref.shape[-2:]} does not match degraded output "
                f"{degraded.shape[-2:]}"
            )
        diff = np.clip(np.abs(ref - degraded) * args.amplify, 0.0, 1.0)
        out_ref = os.path.join(args.out, "reference.png")
        out_diff = os.path.join(args.out, "difference.png")
        dataio.save_png(ref, out_ref)
        dataio.save_png(diff, out_diff)
        outputs += [out_ref, out_diff]
    config = {"model": args.model, "amplify": args.amplify, "scale": phi.scale}
    _write_manifest(args.out, "degrade", config, [args.input], outputs,
                    cfg.seed, started)
    print("wrote " + ", ".join(outputs))
    return 0


def cmd_verify(args):
    passed, failed = verify.run(name_filter=args.filter, break_op=args.break_op)
    print(f"{len(passed)} passed, {len(failed)} failed")
    return 0 if not failed else 2


def build_parser():
    parser = _Parser(prog="kasr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic LR/HR pair dataset")
    p.add_argument("--n", type=int, default=32, help="number of image pairs")
    p.add_argument("--hr-size", type=int, default=64, help="HR image side length")
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--blur-sigma", type=float, default=1.2)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train on an LR/HR pair directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    for flag, typ in (
        ("--scale", int), ("--omega", float), ("--beta", float), ("--gamma", float),
        ("--n-modules", int), ("--lr", float), ("--batch", int), ("--epochs", int),
        ("--lr-decay", float), ("--p", int), ("--seed", int), ("--patch-size", int),
    ):
        p.add_argument(flag, type=typ, default=None)
    p.add_argument("--milestones", help="comma-separated epoch indices")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--no-kans", action="store_true",
                   help="replace the learned degradation with the classical pipeline")
    p.add_argument("--no-hfso", action="store_true",
                   help="train the SR net on the plain reconstruction loss")
    p.add_argument("--no-is", action="store_true",
                   help="disable iterative supervision (single round per batch)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM report over a pair directory")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True,
                   help="checkpoint path, or 'bicubic' / 'identity' stubs")
    p.add_argument("--self-ensemble", action="store_true",
                   help="average over the 8 dihedral transforms")
    p.add_argument("--scale", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sr", help="super-resolve a single PNG")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sr)

    p = sub.add_parser("degrade", help="degradation preview through the learned net")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--ref", help="real LR image to difference against")
    p.add_argument("--amplify", type=float, default=5.0,
                   help="difference image amplification factor")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_degrade)

    p = sub.add_parser("verify", help="run the built-in correctness suites")
    p.add_argument("--filter", default=None, help="run only checks containing this substring")
    p.add_argument("--break-op", default=None, help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_verify)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (CLIError, ContractError, DimensionError, DatasetError,
            CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
