"""Command-line interface.

Subcommands: gen-data, train, eval, corrupt, infer, gradcheck.  Every Config
field is mirrored as a flag (underscores become dashes); --config points at a
key=value file and explicit flags win over it.  The AVCC_SEED environment
variable overrides the configured seed.  Exit codes: 0 success, 1 failure
with a one-line diagnostic, 2 usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import audio
from .checkpoint import load_checkpoint
from .config import Config, make_config
from .data import SceneDataset, generate_dataset, read_ppm, write_ppm
from .density import write_density_bin, write_pgm
from .errors import AvccError
from .groundtruth import DEGRADATION_KINDS, DegradationSpec, degrade
from .model import build_model
from .tensor import Tensor
from .train import Trainer, evaluate

GRADCHECK_TOLERANCE = 1e-4


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    types = {"bool": bool, "int": int, "float": float, "str": str}
    for field in dataclasses.fields(Config):
        kind = field.type if not isinstance(field.type, str) else types[field.type]
        flag = "--" + field.name.replace("_", "-")
        if kind is bool:
            parser.add_argument(flag, dest=field.name, default=None,
                                action=argparse.BooleanOptionalAction)
        else:
            parser.add_argument(flag, dest=field.name, type=kind, default=None)
    parser.add_argument("--config", dest="config_file", default=None,
                        help="key=value config file (flags win on conflict)")


def _config_from_args(args: argparse.Namespace) -> Config:
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(Config)
                 if getattr(args, f.name, None) is not None}
    return make_config(args.config_file, **overrides)


def _add_degradation_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--degrade", choices=DEGRADATION_KINDS, default=None)
    parser.add_argument("--sigma", type=float, default=0.0,
                        help="noise std on the 0..255 scale")
    parser.add_argument("--decay-bound", type=float, default=0.0,
                        help="max illumination decay in [0, 1]")
    parser.add_argument("--illum-noise", type=float, default=0.0,
                        help="illumination noise std on the 0..255 scale")
    parser.add_argument("--occlusion-rate", type=float, default=0.0)
    parser.add_argument("--target-w", type=int, default=0)
    parser.add_argument("--target-h", type=int, default=0)


def _degradation_from_args(args: argparse.Namespace) -> DegradationSpec | None:
    if args.degrade is None:
        return None
    spec = DegradationSpec(
        kind=args.degrade,
        sigma=args.sigma / 255.0,
        decay_bound=args.decay_bound,
        illum_noise=args.illum_noise / 255.0,
        occlusion_rate=args.occlusion_rate,
        target_size=(args.target_w, args.target_h) if args.target_w else None,
    )
    spec.validate()
    return spec


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avcc",
                                     description="audio-visual crowd counting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--count-min", type=int, default=3)
    p.add_argument("--count-max", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--geometry", default="toy")

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p)
    _add_degradation_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--or-sweep", default=None,
                   help="comma-separated occlusion rates, e.g. 0,0.5,1")
    p.add_argument("--report", default=None, help="write the report here")

    p = sub.add_parser("corrupt", help="apply a degradation to a dataset")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_degradation_flags(p)

    p = sub.add_parser("infer", help="run one sample through the model")
    _add_config_flags(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", default=".", help="directory for dumps")
    p.add_argument("--dump-lms", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--coords", type=int, default=1)
    p.add_argument("--seed", type=int, default=7)
    return parser


def cmd_gen_data(args) -> int:
    from .config import GEOMETRIES

    geo = GEOMETRIES[args.geometry]
    manifest = generate_dataset(args.out, args.n,
                                (args.count_min, args.count_max),
                                args.seed, geo)
    print(f"wrote {args.n} scenes, manifest {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    trainer = Trainer(cfg)
    for line in trainer.header_lines():
        print(line)
    logs = trainer.train()
    last = logs[-1] if logs else None
    if last is not None:
        print(f"finished epoch {last.epoch}: total={last.report.total:.6f} "
              f"val_mae={last.val_mae:.4f}")
    print(f"zero_count_images={trainer.zero_count_images}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    sweep = None
    if args.or_sweep:
        sweep = [float(v) for v in args.or_sweep.split(",")]
    report = evaluate(cfg, checkpoint=args.checkpoint,
                      degradation=_degradation_from_args(args),
                      or_sweep=sweep)
    if args.report:
        with open(args.report, "w", encoding="ascii") as fh:
            fh.write(report)
    sys.stdout.write(report)
    return 0


def cmd_corrupt(args) -> int:
    spec = _degradation_from_args(args)
    if spec is None:
        print("corrupt: --degrade is required", file=sys.stderr)
        return 2
    src = SceneDataset(args.src, load_audio=False)
    os.makedirs(args.out, exist_ok=True)
    import shutil

    for i, sid in enumerate(src.ids):
        image = degrade(src.image(i), spec, seed=args.seed * 100003 + i)
        write_ppm(os.path.join(args.out, sid + ".ppm"), image)
        for ext in (".wav", ".pts"):
            path = os.path.join(args.src, sid + ext)
            if os.path.exists(path):
                shutil.copyfile(path, os.path.join(args.out, sid + ext))
    shutil.copyfile(os.path.join(args.src, "manifest.txt"),
                    os.path.join(args.out, "manifest.txt"))
    print(f"corrupted {len(src.ids)} scenes -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    cfg = _config_from_args(args)
    model = build_model(cfg)
    if args.checkpoint:
        load_checkpoint(args.checkpoint, model)
    model.set_training(False)
    data = SceneDataset(cfg.data_dir, load_audio=cfg.uses_audio)
    image = data.image(args.index)
    lms = data.log_mel(args.index)
    dtype = cfg.np_dtype()
    out = model(Tensor(image.astype(dtype)),
                Tensor(lms.astype(dtype)) if lms is not None else None)
    os.makedirs(args.out, exist_ok=True)
    density = out.density.data
    write_pgm(os.path.join(args.out, "density.pgm"), density)
    write_density_bin(os.path.join(args.out, "density.dmp"), density)
    if out.importance is not None:
        with open(os.path.join(args.out, "patch_importance.txt"), "w") as fh:
            for v in out.importance.probs.data.ravel():
                fh.write(f"{v!r}\n")
    if out.counts_est is not None:
        with open(os.path.join(args.out, "patch_counts.txt"), "w") as fh:
            for v in out.counts_est.data.ravel():
                fh.write(f"{v!r}\n")
    if args.dump_lms and lms is not None:
        audio.dump_lms(os.path.join(args.out, "features.lms"), lms)
    print(f"count={out.count!r}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import guarded_gradcheck

    results, grouped, failures = guarded_gradcheck(
        coords_per_tensor=args.coords, seed=args.seed)
    for module, err in sorted(grouped.items()):
        print(f"{module:20s} max_rel_err={err:.3e}")
    if failures:
        print(f"gradcheck FAILED for {len(failures)} parameters: "
              f"{failures[:5]}")
        return 1
    worst = max(err for err, _ in results.values())
    print(f"gradcheck OK: {len(results)} parameter tensors, "
          f"max rel err {worst:.3e} < {GRADCHECK_TOLERANCE}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "corrupt": cmd_corrupt,
        "infer": cmd_infer,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except AvccError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
