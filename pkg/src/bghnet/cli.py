"""Command-line entry point: ``bghnet {synth,train,eval,infer,gradcheck,bench}``.

Exit codes: 0 success, 1 usage error, 2 runtime or numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import dataio
from .bench import bench
from .checkpoint import load_model, save_model
from .config import RunConfig
from .errors import BGHNetError, ConfigError, InputError, NumericError
from .gradcheck import SUITES, format_table, run_suite
from .hfrm import BGHNet
from .losses import LOSS_FLAVORS
from .metrics import evaluate, threshold
from .trainer import train

log = logging.getLogger("bghnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _theta_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated odd integers, got {text!r}")
    if not values or any(v < 1 or v % 2 == 0 for v in values):
        raise argparse.ArgumentTypeError(f"theta values must be odd and >= 1, got {text!r}")
    return values


def _add_config_flags(p: argparse.ArgumentParser, skip: Sequence[str] = ()) -> None:
    group = p.add_argument_group("configuration keys (override --config)")
    for key in RunConfig.kinds():
        if key in skip:
            continue
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", default=None, metavar="VALUE")


def _run_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return cfg.updated(overrides)


def _predict(model: BGHNet, images: torch.Tensor, batch: int = 8) -> np.ndarray:
    """Final-output probabilities for an (N, 3, H, W) batch; pads to multiples of 16."""
    h, w = images.shape[2:]
    ph, pw = (-h) % 16, (-w) % 16
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        images = F.pad(images, (0, pw, 0, ph), mode=mode)
    out = []
    model.eval()
    with torch.no_grad():
        for i in range(0, images.shape[0], batch):
            out.append(torch.sigmoid(model(images[i:i + batch]).final)[:, 0, :h, :w])
    return torch.cat(out).numpy()


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    if args.size < 16:
        raise UsageError(f"--size must be >= 16, got {args.size}")
    ids = dataio.synth_generate(args.count, args.size, args.seed, args.out)
    print(f"wrote {len(ids)} image/mask pairs to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.epochs is not None:
        cfg = cfg.updated({"epochs": args.epochs})
    if args.loss is not None:
        cfg = cfg.updated({"loss": args.loss})
    net_cfg = cfg.network_config()
    train_cfg = cfg.train_config()
    try:
        ids = dataio.list_ids(args.data)
    except OSError as exc:
        raise UsageError(str(exc))
    if not ids:
        raise UsageError(f"no images found under {args.data}/images")
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")

    train_ids, test_ids = dataio.split(ids, dataio.SplitSpec(cfg.train_fraction, cfg.split_seed))
    samples = dataio.load_dataset(args.data, train_ids)
    torch.manual_seed(cfg.seed)
    model = BGHNet(net_cfg)

    def progress(row):
        if row["iter"] % 50 == 0:
            log.info("iter %d lr %.5f total %.4f", row["iter"], row["lr"], row["total"])

    result = train(model, samples, train_cfg, progress)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.bghn", input_size=cfg.size)
    result.write_csv(out / "loss.csv")
    (out / "run.cfg").write_text(cfg.to_text(), encoding="utf-8")
    (out / "train_ids.txt").write_text("".join(f"{i}\n" for i in train_ids))
    (out / "test_ids.txt").write_text("".join(f"{i}\n" for i in test_ids))
    print(f"trained {result.max_iter} iterations; final loss {result.curve[-1]['total']:.4f}; "
          f"model written to {out / 'model.bghn'}")
    return EXIT_OK


def _eval_ids(args) -> List[str]:
    ids = dataio.list_ids(args.data)
    if args.split == "all":
        return ids
    _, test_ids = dataio.split(ids, dataio.SplitSpec(args.train_fraction, args.split_seed))
    return test_ids


def cmd_eval(args) -> int:
    if (args.model is None) == (args.predictions is None):
        raise UsageError("give exactly one of --model or --predictions")
    try:
        ids = _eval_ids(args)
    except OSError as exc:
        raise UsageError(str(exc))
    gts = [dataio.load_mask(Path(args.data) / "masks" / f"{i}.png") for i in ids]

    if args.predictions is not None:
        preds = []
        for i in ids:
            path = Path(args.predictions) / f"{i}.png"
            if not path.exists():
                raise UsageError(f"prediction missing: {path}")
            preds.append(dataio.load_mask(path))
    else:
        try:
            model, extras = load_model(args.model)
        except (OSError, InputError) as exc:
            raise UsageError(f"cannot load model: {exc}")
        size = args.size or extras.get("input_size", 512)
        samples = [dataio.preprocess_test(s, size) for s in dataio.load_dataset(args.data, ids)]
        gts = [s.mask for s in samples]
        images, _ = dataio.to_batch(samples)
        if images.shape[1] != model.cfg.stage.in_channels:
            raise UsageError(f"model expects {model.cfg.stage.in_channels} channels, data has {images.shape[1]}")
        preds = [threshold(p, args.threshold) for p in _predict(model, images)]
        if args.save_predictions:
            pred_dir = Path(args.save_predictions)
            pred_dir.mkdir(parents=True, exist_ok=True)
            for i, p in zip(ids, preds):
                dataio.save_mask(p, pred_dir / f"{i}.png")

    report = evaluate(zip(ids, preds, gts), theta_primes=args.theta_prime, two_class=args.two_class)
    text = report.to_csv()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text.splitlines()[0])
    print(text.splitlines()[-1])
    return EXIT_OK


def cmd_infer(args) -> int:
    if not 0 <= args.threshold <= 1:
        raise UsageError(f"--threshold must be in [0, 1], got {args.threshold}")
    try:
        model, _ = load_model(args.model)
        image = dataio.load_image(args.image)
    except (OSError, InputError) as exc:
        raise UsageError(str(exc))
    prob = _predict(model, torch.from_numpy(image)[None])[0]
    dataio.save_mask(threshold(prob, args.threshold), args.out)
    print(f"wrote {image.shape[1]}x{image.shape[2]} mask to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.target, seed=args.seed, tol=args.tol)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_bench(args) -> int:
    net_cfg = _run_config(args).network_config()
    report = bench(net_cfg, args.size)
    print("\n".join(report.lines()))
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bghnet", description="Boundary-aware binary segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic ellipse dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=250)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=7)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--epochs", type=int)
    t.add_argument("--loss", choices=LOSS_FLAVORS)
    t.add_argument("--out", required=True)
    _add_config_flags(t, skip=("epochs", "loss"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate predictions against ground truth")
    e.add_argument("--model")
    e.add_argument("--predictions", help="directory of <id>.png masks to score instead of a model")
    e.add_argument("--data", required=True)
    e.add_argument("--theta-prime", type=_theta_list, default=[3, 5, 7])
    e.add_argument("--out")
    e.add_argument("--split", choices=("test", "all"), default="test")
    e.add_argument("--split-seed", type=int, default=0)
    e.add_argument("--train-fraction", type=float, default=0.8)
    e.add_argument("--size", type=int)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--two-class", action="store_true", help="average foreground and background IoU")
    e.add_argument("--save-predictions")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="segment a single image")
    i.add_argument("--model", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--threshold", type=float, default=0.5)
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--target", choices=SUITES, default="losses")
    g.add_argument("--tol", type=float, default=1e-3)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="parameter and FLOP accounting")
    b.add_argument("--size", type=int, default=512)
    b.add_argument("--config")
    _add_config_flags(b, skip=("size",))
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits on bad flags (code 1 via _Parser) and on --help (code 0)
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"bghnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, BGHNetError, OSError) as exc:
        print(f"bghnet {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
