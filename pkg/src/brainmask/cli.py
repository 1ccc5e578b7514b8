"""Command-line front end.

Exit codes:
  0  success
  1  unexpected internal error
  2  usage error (bad arguments, unknown subcommand)
  3  missing file or other I/O failure
  4  malformed or unsupported NIfTI input
  5  weights/architecture problem (shape, fingerprint, blob layout)
  6  volume preprocessing failure (singular affine, flat intensities, empty foreground)
  7  training diverged
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from typing import List, Optional

import numpy as np

from . import __version__
from .errors import BrainmaskError

EXIT_TABLE = __doc__.split("Exit codes:", 1)[1]


def _floats(text):
    return [float(t) for t in text.replace(",", " ").split()]


def _ints(text):
    return [int(t) for t in text.replace(",", " ").replace("-", " ").split()]


def _write(text: str, path: Optional[str]):
    if path and path != "-":
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# --- subcommands -----------------------------------------------------------

def cmd_strip(args):
    from .pipeline import StripRequest, run_strip

    req = StripRequest(
        input=args.input, output=args.output, weights=args.weights, mask_only=args.mask_only,
        mask_output=args.mask, crop=args.crop, crop_threshold=args.crop_threshold,
        crop_margin=args.crop_margin, threads=args.threads,
        nonzero_percentiles=args.nonzero_percentiles)
    result = run_strip(req)
    if args.verbose:
        t = ", ".join(f"{k}={v:.2f}s" for k, v in result.timings.items())
        print(f"mask voxels: {int(result.mask.data.sum())}; {t}", file=sys.stderr)
    return 0


def cmd_analyze(args):
    from .meshnet.spec import DilationSchedule
    from .spectral import format_matrix, kernel_spectrum, schedule_report

    schedules = []
    for item in args.schedule or []:
        name, _, dil = item.rpartition("=")
        schedules.append((name or dil, tuple(_ints(dil))))
    for g in args.glyphs or []:
        schedules.append(DilationSchedule.from_glyphs(g))
    include = args.preset == "mindgrab"
    _write(schedule_report(schedules, args.kernel_size, include_published=include), args.out)

    if args.spectrum:
        taps = _floats(args.taps)
        dilations = _ints(args.dilations)
        if args.two_d:
            if len(dilations) != 1:
                raise ValueError("--2d needs exactly one dilation")
            mag = kernel_spectrum(taps, dilations[0], args.fft_size, dims=2).magnitudes
        else:
            mag = np.stack([kernel_spectrum(taps, d, args.fft_size).magnitudes for d in dilations])
        _write(format_matrix(mag), args.spectrum_out)
    return 0


def _eval_pair(pred_path, gt_path):
    from .metrics import evaluate
    from .niftio import load_volume

    pred = load_volume(pred_path)
    gt = load_volume(gt_path)
    return evaluate(pred.data > 0.5, gt.data > 0.5, gt.spacing)


def cmd_eval(args):
    from .metrics import MSD_NOTE

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    buf.write(f"# {MSD_NOTE}\n")
    if args.batch:
        groups = {}
        with open(args.batch) as fh:
            for row in csv.reader(fh, delimiter="\t"):
                if not row or row[0].startswith("#") or row[:3] == ["group", "pred", "gt"]:
                    continue
                if len(row) < 3:
                    raise ValueError(f"batch rows need group, pred, gt columns: {row}")
                r = _eval_pair(row[1], row[2])
                groups.setdefault(row[0], []).append((r.dice, r.precision, r.recall, r.msd))
        cols = ["dice", "precision", "recall", "msd_mm"]
        w.writerow(["group", "n"] + [f"{c}_{s}" for c in cols for s in ("mean", "sd")])
        for g, vals in groups.items():
            a = np.asarray(vals)
            sd = a.std(axis=0, ddof=1) if len(a) > 1 else np.zeros(a.shape[1])
            w.writerow([g, len(a)] + [f"{x:.6f}" for pair in zip(a.mean(axis=0), sd) for x in pair])
    else:
        if not args.pred or not args.gt:
            raise ValueError("eval needs PRED and GT paths, or --batch")
        r = _eval_pair(args.pred, args.gt)
        w.writerow(["file", "dice", "precision", "recall", "msd_mm"])
        w.writerow([args.pred, f"{r.dice:.6f}", f"{r.precision:.6f}", f"{r.recall:.6f}",
                    f"{r.msd:.6f}"])
    _write(buf.getvalue(), args.out)
    return 0


def cmd_bench(args):
    from .pipeline import bench, bench_csv

    records = bench(args.inputs, args.weights, compare_crop=args.compare_crop, use_crop=args.crop,
                    crop_threshold=args.crop_threshold, crop_margin=args.crop_margin,
                    threads=args.threads)
    _write(bench_csv(records), args.out)
    return 0


def cmd_train_toy(args):
    from .meshnet import preset, write_model
    from .traintoy import NoisySpheres, TrainConfig, train_toy

    spec = preset(args.spec, args.channels)
    cfg = TrainConfig(max_lr=args.max_lr, total_steps=args.steps, cycles=args.cycles,
                      batch_size=args.batch_size, seed=args.seed,
                      checkpoint=not args.no_checkpoint)
    log_fh = open(args.log, "w") if args.log and args.log != "-" else sys.stdout
    writer = csv.writer(log_fh, lineterminator="\n")
    writer.writerow(["step", "lr", "loss", "dice"])

    def log(rec):
        writer.writerow([rec["step"], f"{rec['lr']:.6g}", f"{rec['loss']:.6f}", f"{rec['dice']:.6f}"])

    try:
        weights = train_toy(spec, cfg, NoisySpheres.scaled(args.size), log=log)
    finally:
        if log_fh is not sys.stdout:
            log_fh.close()
    write_model(weights, args.out)
    return 0


def cmd_weights(args):
    from .meshnet import count_params, init_weights, preset, read_model, write_model
    from .pipeline import threshold_weights

    if args.weights_cmd == "inspect":
        store = read_model(args.model)
        spec = store.spec
        print(f"name: {spec.name}")
        print(f"fingerprint: {spec.fingerprint()}")
        print(f"layers: {len(spec.layers)}")
        print(f"parameters: {count_params(spec)}")
        print(f"blob bytes: {store.nbytes}")
        print("index,in,out,k,dilation,bias,norm,activation")
        for i, l in enumerate(spec.layers):
            print(f"{i},{l.in_channels},{l.out_channels},{l.kernel_size},{l.dilation},"
                  f"{int(l.has_bias)},{l.norm},{l.activation}")
    elif args.weights_cmd == "init":
        paths = write_model(init_weights(preset(args.preset, args.channels), args.seed), args.out)
        print("\n".join(paths))
    elif args.weights_cmd == "threshold":
        paths = write_model(threshold_weights(args.level), args.out)
        print("\n".join(paths))
    return 0


# --- parser ----------------------------------------------------------------

def _add_crop_flags(p):
    p.add_argument("--crop", action="store_true",
                   help="run the network on a head-tight crop of the conformed volume")
    p.add_argument("--crop-threshold", type=float, default=0.05,
                   help="normalised intensity above which voxels count as head (default 0.05)")
    p.add_argument("--crop-margin", type=int, default=8,
                   help="voxels of padding around the head bounding box (default 8)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $BRAINMASK_THREADS or all logical cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brainmask", description="Skull stripping with a dilated convolutional network.",
        epilog="exit codes:" + EXIT_TABLE, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, epilog="exit codes:" + EXIT_TABLE,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("strip", cmd_strip, "Extract the brain from a NIfTI volume.")
    p.add_argument("input")
    p.add_argument("output", help="brain image (or the mask with --mask-only)")
    p.add_argument("--weights", required=True, help="model.json (model.bin alongside)")
    p.add_argument("--mask-only", action="store_true", help="write only the mask to OUTPUT")
    p.add_argument("--mask", help="mask path (default: OUTPUT with a _mask suffix)")
    p.add_argument("--nonzero-percentiles", action="store_true",
                   help="compute normalisation percentiles over nonzero voxels only")
    p.add_argument("-v", "--verbose", action="store_true")
    _add_crop_flags(p)

    p = add("analyze", cmd_analyze, "Receptive-field table and kernel spectra for dilation schedules.")
    p.add_argument("--preset", choices=["mindgrab", "none"], default="mindgrab",
                   help="include the four published block configurations (default)")
    p.add_argument("--schedule", action="append", metavar="NAME=D1,D2,...",
                   help="extra schedule; may repeat")
    p.add_argument("--glyphs", action="append", metavar="GLYPHS",
                   help="schedule written as blocks, e.g. '▶◀' or '><'")
    p.add_argument("-k", "--kernel-size", type=int, default=3)
    p.add_argument("--out", help="CSV destination (default stdout)")
    p.add_argument("--spectrum", action="store_true", help="also emit spectrum magnitudes")
    p.add_argument("--taps", default="0.25,0.5,0.25")
    p.add_argument("--dilations", default="1,2,4,8,16")
    p.add_argument("--fft-size", type=int, default=64)
    p.add_argument("--2d", dest="two_d", action="store_true",
                   help="N x N envelope (outer product) for a single dilation")
    p.add_argument("--spectrum-out", help="matrix destination (default stdout)")

    p = add("eval", cmd_eval, "Dice, precision, recall and mean surface distance.")
    p.add_argument("pred", nargs="?")
    p.add_argument("gt", nargs="?")
    p.add_argument("--batch", help="TSV with columns group, pred, gt; prints mean and SD per group")
    p.add_argument("--out")

    p = add("bench", cmd_bench, "Time the strip pipeline and report memory use as CSV.")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--weights", required=True)
    p.add_argument("--compare-crop", action="store_true", help="run each input cropped and uncropped")
    p.add_argument("--out")
    _add_crop_flags(p)

    p = add("train-toy", cmd_train_toy, "Train a small network on synthetic noisy spheres.")
    p.add_argument("--spec", default="toy-block", help="preset name or block glyphs")
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--cycles", type=int, default=1)
    p.add_argument("--max-lr", type=float, default=0.02)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--size", type=int, default=24, help="synthetic grid extent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-checkpoint", action="store_true",
                   help="keep every activation instead of recomputing (faster, more memory)")
    p.add_argument("--out", required=True, help="model path stem (.json/.bin)")
    p.add_argument("--log", help="per-step CSV destination (default stdout)")

    p = add("weights", cmd_weights, "Inspect or create weight files.")
    wsub = p.add_subparsers(dest="weights_cmd", metavar="ACTION", required=True)
    q = wsub.add_parser("inspect", help="summarise a model.json/model.bin pair")
    q.add_argument("model")
    q = wsub.add_parser("init", help="randomly initialised weights for a preset")
    q.add_argument("--preset", default="mindgrab")
    q.add_argument("--channels", type=int, default=None)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q = wsub.add_parser("threshold", help="one-layer intensity threshold network")
    q.add_argument("--level", type=float, default=0.5)
    q.add_argument("--out", required=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrainmaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        name = exc.filename or str(exc)
        print(f"error: file not found: {name}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
