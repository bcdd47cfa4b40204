"""Command-line entry point: ``svphw <command> [flags] [--key=value ...]``.

Commands: gen-data, train, predict, eval, flops, gradcheck.
Exit codes: 0 success, 1 usage or config error, 2 verification failure,
3 numerical abort.
"""

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import _kernels
from . import tensor as T
from .config import ConfigError, RunConfig
from .data import MANIFEST, Sequence, export_pgm, load_split, tile_strip, write_dataset, write_sequence
from .flops import count_flops, ratio_mismatches
from .gradcheck import report_tsv, run_all
from .metrics import MetricReport
from .model import SVPHW, model_specs
from .params import CheckpointError, ParameterStore
from .train import NumericalAbort, train

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3
RESOLVED_NAME = "config.resolved"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="override the seed key")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads for gen-data and eval")
    common.add_argument("--fp64", action="store_true", help="run in 64-bit (verification mode)")
    parser = _Parser(prog="svphw", description="hybrid-warping stochastic video prediction")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    helps = {
        "gen-data": "generate a synthetic sprite dataset",
        "train": "train a model on the train split",
        "predict": "sample prior rollouts from a checkpoint",
        "eval": "PSNR/SSIM of sampled rollouts",
        "flops": "MAC and parameter report",
        "gradcheck": "finite-difference gradient verification",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def resolve_config(args, extras):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.apply_overrides(extras)
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.fp64:
        cfg.set("fp64", True)
    if cfg.backend:
        _kernels.set_backend(cfg.backend)
    cfg.set("backend", _kernels.get_backend())
    try:
        cfg.model_config()
        cfg.world_config()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return cfg


def prepare_output(out, force, resolved):
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_NAME).write_text(resolved)
    return out


def _model_from_checkpoint(cfg):
    if not cfg.checkpoint:
        raise ConfigError("no checkpoint given (set checkpoint=PATH)")
    path = Path(cfg.checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    model = SVPHW(cfg.model_config())
    model.params.load_into(ParameterStore.load(path))
    if cfg.fp64:
        model.params.astype(np.float64)
    return model


def _load_sequences(cfg, split, min_length):
    try:
        seqs = load_split(cfg.data_dir, split)
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from None
    if not seqs:
        raise ConfigError(f"no {split!r} sequences in {cfg.data_dir}")
    mc = cfg.model_config()
    for s in seqs:
        _, c, h, w = s.frames.shape
        if (c, h, w) != (mc.channels, mc.height, mc.width):
            raise ConfigError(f"dataset frames are {c}x{h}x{w}, model expects {mc.channels}x{mc.height}x{mc.width}")
        if s.frames.shape[0] < min_length:
            raise ConfigError(f"sequences have {s.frames.shape[0]} frames, need at least {min_length}")
    return seqs


def sample_rollouts(model, frames, horizon, n_samples, base_seed):
    """[n_samples, horizon, C, H, W] prior rollouts from the first k frames."""
    k = model.config.cond_frames
    cond = frames[:k][:, None]
    out = []
    for j in range(n_samples):
        res = model.rollout(cond, horizon, "infer_prior", seed=base_seed + j)
        out.append(res.frames[:, 0])
    return np.stack(out)


def _map(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def precheck(command, cfg):
    """Argument checks that must fail before anything is written."""
    if command == "gen-data":
        if cfg.n_train < 1:
            raise ConfigError("n_train must be >= 1")
        if cfg.n_val < 0 or cfg.n_test < 0:
            raise ConfigError("n_val and n_test must be >= 0")
    if command == "train" and cfg.checkpoint_every < 1:
        raise ConfigError("checkpoint_every must be >= 1")
    if command in ("predict", "eval"):
        if not cfg.checkpoint:
            raise ConfigError("no checkpoint given (set checkpoint=PATH)")
        if cfg.n_samples < 1 or cfg.eval_horizon < 1 or cfg.max_sequences < 1:
            raise ConfigError("n_samples, eval_horizon and max_sequences must be >= 1")


def cmd_gen_data(cfg, out, threads):
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    names = write_dataset(out, cfg.world_config(), counts, threads=threads)
    print(f"wrote {len(names)} sequences and {MANIFEST} to {out}")
    return EXIT_OK


def cmd_train(cfg, out, threads):
    mc = cfg.model_config()
    seqs = _load_sequences(cfg, "train", mc.cond_frames + mc.horizon)
    model = SVPHW(mc)
    if cfg.fp64:
        model.params.astype(np.float64)
    result = train(model, seqs, steps=mc.steps, out_dir=out, checkpoint_every=cfg.checkpoint_every)
    if result.losses:
        print(f"trained {result.steps_done} steps, final total loss {result.losses[-1].total!r}")
    else:
        print("steps = 0: wrote the initialized checkpoint")
    return EXIT_OK


def cmd_predict(cfg, out, threads):
    model = _model_from_checkpoint(cfg)
    k = model.config.cond_frames
    seqs = _load_sequences(cfg, cfg.eval_split, k)[: cfg.max_sequences]
    for i, s in enumerate(seqs):
        preds = sample_rollouts(model, s.frames, cfg.eval_horizon, cfg.n_samples, cfg.seed)
        for j, frames in enumerate(preds):
            stem = out / f"pred_{i:03d}_sample{j}"
            write_sequence(Sequence(frames.astype(np.float32), cfg.seed + j, s.config_hash), f"{stem}.seq")
            export_pgm(tile_strip(np.concatenate([s.frames[:k], frames])), f"{stem}.pgm")
    print(f"wrote {len(seqs) * cfg.n_samples} predictions of {cfg.eval_horizon} frames to {out}")
    return EXIT_OK


def cmd_eval(cfg, out, threads):
    model = _model_from_checkpoint(cfg)
    k, h = model.config.cond_frames, cfg.eval_horizon
    seqs = _load_sequences(cfg, cfg.eval_split, k + h)[: cfg.max_sequences]
    preds = _map(lambda s: sample_rollouts(model, s.frames, h, cfg.n_samples, cfg.seed), seqs, threads)
    report = MetricReport.from_predictions([s.frames[k : k + h] for s in seqs], preds)
    (out / "eval_steps.tsv").write_text(report.step_table())
    (out / "eval_sequences.tsv").write_text(report.sequence_table())
    summary = "".join(f"{key} = {v!r}\n" if isinstance(v, float) else f"{key} = {v}\n" for key, v in report.summary().items())
    (out / "eval_summary.txt").write_text(summary)
    sys.stdout.write(summary)
    return EXIT_OK


def cmd_flops(cfg, out, threads):
    mc = cfg.model_config()
    report = count_flops(mc)
    (out / "flops.tsv").write_text(report.to_tsv())
    (out / "flops_summary.txt").write_text(report.summary())
    (out / "stacks.txt").write_text("".join(spec.to_flat(name) for name, spec in model_specs(mc).items()))
    sys.stdout.write(report.summary())
    bad = ratio_mismatches(report)
    if bad:
        print(f"MAC ratio off the closed form for: {', '.join(bad)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_gradcheck(cfg, out, threads):
    results = run_all(seed=cfg.seed)
    (out / "gradcheck.tsv").write_text(report_tsv(results))
    failed = [r for r in results if not r.passed]
    worst = max(results, key=lambda r: r.error / r.tolerance)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed; worst {worst.name} at {worst.error:.2e}")
    for r in failed:
        print(f"FAILED {r.name}: {r.error:.3e} >= {r.tolerance:g}", file=sys.stderr)
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "flops": cmd_flops,
    "gradcheck": cmd_gradcheck,
}


def _default_out(command, cfg):
    return cfg.data_dir if command == "gen-data" else cfg.out_dir


def main(argv=None):
    parser = build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
        bad = [e for e in extras if not (e.startswith("--") and "=" in e)]
        if bad:
            raise UsageError(f"unrecognized arguments: {' '.join(bad)}")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = resolve_config(args, extras)
        precheck(args.command, cfg)
        out = prepare_output(args.out or _default_out(args.command, cfg), args.force, cfg.resolved())
        if args.command == "gen-data":
            for stale in list(out.glob("*.seq")) + [out / MANIFEST]:
                stale.unlink(missing_ok=True)
        prev = T.default_dtype()
        T.set_default_dtype(np.float64 if cfg.fp64 else np.float32)
        try:
            return COMMANDS[args.command](cfg, out, args.threads)
        finally:
            T.set_default_dtype(prev)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"svphw: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError, OSError) as e:
        print(f"svphw: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as e:
        print(f"svphw: numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
