"""Command-line entry point (``latentvid``).

Exit codes: 0 ok, 2 configuration error, 3 numerical fault, 4 I/O error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .config import load_config, resolve_output
from .errors import LatentVidError
from .train import AE_DIR, dm_dir_name, train_autoencoder, train_diffusion


def _common(p):
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--out", help="output directory (default: run.output_dir)")
    p.add_argument("--seed", type=int, help="override run.seed")


def build_parser():
    parser = argparse.ArgumentParser(prog="latentvid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-ae", help="train the 3D autoencoder and compute latent stats")
    _common(p)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("train-dm", help="train a latent diffusion model")
    _common(p)
    p.add_argument("--role", choices=["unconditional", "prediction", "interpolation"], required=True)
    p.add_argument("--ae", help="autoencoder checkpoint (default: <out>/autoencoder)")
    p.add_argument("--init-from", help="diffusion checkpoint to start from")
    p.add_argument("--latent-stride", type=int, help="keep every n-th latent frame (sparse models)")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--steps", type=int)

    for name, helptext in (("sample", "sample one window unconditionally"),
                           ("extend", "autoregressively extend to --frames"),
                           ("hierarchical", "sparse generation plus interpolation")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--ae", required=True)
        p.add_argument("--dm", required=True, help="diffusion checkpoint (sparse model for hierarchical)")
        p.add_argument("--frames", type=int, required=True)
        p.add_argument("--num-videos", type=int, default=1)
        if name in ("extend", "hierarchical"):
            p.add_argument("--overlap", type=int)
            p.add_argument("--noise-level", type=int)
            p.add_argument("--guidance-w", type=float)
        if name == "hierarchical":
            p.add_argument("--interp", required=True, help="interpolation diffusion checkpoint")
            p.add_argument("--sparse-stride", type=int)

    p = sub.add_parser("eval", help="degradation curve of generated videos")
    _common(p)
    p.add_argument("--ae", required=True)
    p.add_argument("--generated", required=True, help="directory of .raw clips")
    p.add_argument("--reference", default="synthetic",
                   help="directory of .raw reference clips, or 'synthetic'")

    p = sub.add_parser("inspect-checkpoint", help="verify and print a checkpoint manifest")
    p.add_argument("path")
    return parser


def _config(args):
    overrides = list(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "latent_stride", None) is not None:
        overrides.append(f"dm_train.latent_stride={args.latent_stride}")
    cfg = load_config(args.config, overrides)
    return cfg.validate()


def _out(args, cfg):
    return resolve_output(args.out or cfg.run.output_dir)


def run(args):
    if args.command == "inspect-checkpoint":
        manifest, _ = ckpt.verify_checkpoint(args.path)
        print(json.dumps(manifest, indent=2, sort_keys=True))
        return 0
    cfg = _config(args)
    out = _out(args, cfg)
    if args.command == "train-ae":
        path = train_autoencoder(cfg, out, resume=args.resume, max_steps=args.steps)
        print(path)
    elif args.command == "train-dm":
        ae = args.ae or str(out / AE_DIR)
        path = train_diffusion(cfg, out, ae, args.role, init_from=args.init_from,
                               resume=args.resume, max_steps=args.steps)
        print(path)
    elif args.command in ("sample", "extend", "hierarchical"):
        from .pipeline import sample_command

        kwargs = {}
        if args.command != "sample":
            kwargs.update(overlap=args.overlap, noise_level=args.noise_level, guidance_w=args.guidance_w)
        if args.command == "hierarchical":
            kwargs.update(sparse_stride=args.sparse_stride, interp_dir=args.interp)
        seed = cfg.run.seed
        path = sample_command(cfg, args.ae, args.dm, out, args.frames, args.num_videos, seed,
                              mode=args.command, **kwargs)
        print(path)
    elif args.command == "eval":
        from .pipeline import eval_command

        series = eval_command(cfg, args.ae, args.generated, out, reference=args.reference)
        sys.stdout.write(series.table())
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except LatentVidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
