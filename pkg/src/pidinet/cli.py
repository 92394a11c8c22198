"""Command-line entry point: synth, train, infer, convert, eval, bench, params."""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .bench import benchmark
from .config import ArchConfig
from .errors import ConfigError, DataError, DimensionError, ModelFormatError, ParameterError
from .evaluate import EvalConfig, ods_ois
from .model import build_model, convert_model_for_inference, count_macs, count_params
from .synth import synth_dataset
from .train import LossConfig, TrainConfig, train_loop

log = logging.getLogger("pidinet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _cmd_synth(a):
    if a.n < 1:
        raise ParameterError(f"--n must be positive, got {a.n}")
    io.save_dataset(a.out, synth_dataset(a.n, a.size, a.annotators, a.seed))
    print(f"wrote {a.n} samples to {a.out}")


def _arch(a):
    return ArchConfig.from_string(a.config, a.channels, use_csam=not a.no_csam,
                                  use_cdcm=not a.no_cdcm)


def _cmd_train(a):
    cfg = _arch(a)
    data = io.load_dataset(a.data)
    model = build_model(cfg, seed=a.seed)
    tcfg = TrainConfig(epochs=a.epochs, base_lr=a.lr, schedule_epochs=max(a.epochs, 14),
                       augment=not a.no_augment)
    _, history = train_loop(model, data, LossConfig(a.lam, a.eta), tcfg, seed=a.seed,
                            on_epoch=lambda e: print(f"epoch {e.epoch} loss {e.mean_loss:.4f} lr {e.lr:.2e}"))
    io.save_model(model, a.out)
    if a.log:
        io.write_loss_log(a.log, history)
    print(f"saved {a.out}")


def _cmd_infer(a):
    model = io.load_model(a.model)
    x = io.load_image(a.image)
    side, fused = model.forward(x.astype(np.float32))
    io.write_pgm(a.out, fused[0, 0])
    if a.save_side_maps:
        out = Path(a.out)
        stem = out.name[:-4] if out.name.endswith(".pgm") else out.name
        for k, s in enumerate(side, start=1):
            io.write_pgm(out.with_name(f"{stem}.side{k}.pgm"), s[0, 0])
    print(f"wrote {a.out}")


def _cmd_convert(a):
    model = io.load_model(a.model)
    io.save_model(model if model.converted else convert_model_for_inference(model), a.out)
    print(f"wrote {a.out}")


def _cmd_eval(a):
    preds = {p.name[:-4]: p for p in Path(a.pred).glob("*.pgm") if not p.name.endswith(io.TRUTH_SUFFIX)}
    truths = {p.name[:-len(io.TRUTH_SUFFIX)]: p for p in Path(a.truth).glob(f"*{io.TRUTH_SUFFIX}")}
    stems = sorted(set(preds) & set(truths))
    if not stems:
        raise DataError(f"no predictions in {a.pred} match truths in {a.truth}")
    for s in sorted(set(truths) - set(preds)):
        log.warning("no prediction for %s", s)
    cfg = EvalConfig(n_thresholds=a.thresholds, eta=a.eta, quantile=a.quantile)
    rep = ods_ois([io.load_map(preds[s]) for s in stems],
                  [io.load_map(truths[s]) for s in stems], cfg)
    if a.report:
        io.write_pr_curve(a.report, rep.curve)
    print(f"images={len(stems)} ods={rep.ods:.4f} ois={rep.ois:.4f} threshold={rep.ods_threshold:.4f}")


def _cmd_bench(a):
    model = io.load_model(a.model)
    if not model.converted:
        model = convert_model_for_inference(model)
    rep = benchmark(model, a.size, a.size, warmup=a.warmup, iters=a.iters)
    if a.report:
        Path(a.report).write_text(rep.to_json())
    sys.stdout.write(rep.to_text())


def _cmd_params(a):
    model = build_model(_arch(a))
    print(f"config={model.config.text}")
    print(f"params={count_params(model)}")
    print(f"macs@{a.size}x{a.size}={count_macs(model, a.size, a.size)}")


def _arch_flags(p):
    p.add_argument("--config", default="[CARV]x4", help="block config, e.g. '[CARV]x4'")
    p.add_argument("--channels", type=int, default=60, help="base channels C")
    p.add_argument("--no-csam", action="store_true")
    p.add_argument("--no-cdcm", action="store_true")


def build_parser():
    p = _Parser(prog="pidinet", description="Pixel-difference edge detector toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--annotators", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("train", help="train a model on a PPM/PGM dataset")
    s.add_argument("--data", required=True)
    _arch_flags(s)
    s.add_argument("--epochs", type=int, default=14)
    s.add_argument("--lr", type=float, default=0.005)
    s.add_argument("--lambda", dest="lam", type=float, default=1.1)
    s.add_argument("--eta", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--log", help="write per-epoch loss CSV here")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("infer", help="edge map for one image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--save-side-maps", action="store_true")
    s.set_defaults(func=_cmd_infer)

    s = sub.add_parser("convert", help="fold PDC layers into plain convolutions")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_convert)

    s = sub.add_parser("eval", help="ODS/OIS of predicted maps against truths")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--thresholds", type=int, default=33)
    s.add_argument("--eta", type=float, default=0.3)
    s.add_argument("--quantile", action="store_true", help="quantile thresholds")
    s.add_argument("--report", help="PR curve CSV")
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("bench", help="params, MACs and FPS of a model")
    s.add_argument("--model", required=True)
    s.add_argument("--size", type=int, default=200)
    s.add_argument("--iters", type=int, default=50)
    s.add_argument("--warmup", type=int, default=3)
    s.add_argument("--report", help="JSON report path")
    s.set_defaults(func=_cmd_bench)

    s = sub.add_parser("params", help="parameter and MAC counts for a config")
    _arch_flags(s)
    s.add_argument("--size", type=int, default=200)
    s.set_defaults(func=_cmd_params)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        a.func(a)
    except (ConfigError, ParameterError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, ModelFormatError, DimensionError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
