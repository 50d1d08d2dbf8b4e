"""Command-line interface: ``gdlnet <command> [options]``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
runtime or numerical failures.
"""
from __future__ import annotations

import argparse
import contextlib
import sys
from pathlib import Path

from . import data, evaluate, gradcheck
from .config import ConfigError, load_config
from .gabor import ConvergenceError
from .modelfile import ModelFileError, Provenance, load_model, save_model
from .net import ArchConfig, count_params, forward, init_model
from .train import NonFiniteError, train

# rounded reference counts for the two full-size single-noise-level models
REFERENCE_COUNTS = {
    ArchConfig(30, 169, 2, 11, 1): "66k",
    ArchConfig(30, 169, 2, 11, 3): "188k",
}
MODEL_NAME = "model.gdl"
LOG_NAME = "train.log"


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _sigmas(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--sigmas expects comma-separated numbers, got {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise UsageError("--sigmas needs at least one non-negative noise level")
    return vals


def _dataset(path, split):
    ds = data.Dataset.from_manifest(path, split)
    for p in ds.paths:
        if not Path(p).is_file():
            raise FileNotFoundError(f"image listed in {path} not found: {p}")
    return ds


# --- commands -------------------------------------------------------------

def cmd_train(args) -> int:
    run = load_config(args.config)
    if args.seed is not None or args.steps is not None:
        from dataclasses import replace

        t = run.training
        t = replace(t, seed=t.seed if args.seed is None else args.seed,
                    steps=t.steps if args.steps is None else args.steps)
        run = replace(run, training=t)
    if run.train_manifest is None:
        raise ConfigError(f"{run.source}: [data] train: a training manifest is required")
    train_ds = _dataset(run.train_manifest, "train")
    val_ds = _dataset(run.val_manifest, "val") if run.val_manifest else None
    test_ds = _dataset(run.test_manifest, "test") if run.test_manifest else None
    data.check_disjoint(*[d for d in (train_ds, val_ds, test_ds) if d is not None])

    out = Path(args.out) if args.out else run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    print(f"parameters: {count_params(run.arch)}")
    with open(out / LOG_NAME, "w") as log:
        def sink(line):
            log.write(line + "\n")
            log.flush()
            if not args.quiet:
                print(line)

        result = train(run.arch, train_ds.images(), run.training,
                       val_images=val_ds.images() if val_ds else None, sink=sink)
    prov = Provenance(run.training.seed, run.training.steps,
                      data.manifest_hash(run.train_manifest))
    save_model(out / MODEL_NAME, result.theta, run, prov)
    print(f"model written to {out / MODEL_NAME}")
    return 0


def cmd_denoise(args) -> int:
    mf = load_model(args.model)
    theta = mf.theta
    if args.sigma is None:
        if theta.config.adaptive:
            raise UsageError("this model has noise-adaptive thresholds; pass the noise "
                             "standard deviation with --sigma (0-255 scale)")
        sigma = 0.0
    else:
        sigma = args.sigma
    if sigma < 0:
        raise UsageError("--sigma must be non-negative")
    y = data.load_image(args.image)
    xhat = forward(theta, y, sigma)[0]
    data.save_image(args.out, xhat)
    if args.clean:
        x = data.load_image(args.clean)
        print(f"psnr_noisy_db={evaluate.psnr(x, y):.4f}")
        print(f"psnr_denoised_db={evaluate.psnr(x, xhat):.4f}")
    return 0


def cmd_eval(args) -> int:
    mf = load_model(args.model)
    manifest = args.manifest or mf.run.test_manifest
    if manifest is None:
        raise UsageError("no test manifest: pass --manifest")
    ds = _dataset(manifest, "test")
    t = mf.run.training
    reports = evaluate.sweep(mf.theta, ds.images(), _sigmas(args.sigmas), names=ds.names(),
                             model_id=args.model_id or Path(args.model).stem,
                             sigma_train=(t.sigma_lo, t.sigma_hi), seed=args.seed)
    evaluate.write_reports(args.out, reports, baseline=args.baseline)
    for rep in reports:
        print(f"sigma={rep.sigma_test:g} mean_psnr_db={rep.mean:.4f} "
              f"noisy_psnr_db={rep.noisy_mean:.4f}")
    return 0


def cmd_dictviz(args) -> int:
    if args.model:
        theta = load_model(args.model).theta
    elif args.config:
        arch = load_config(args.config).arch
        seed = 0 if args.seed is None else args.seed
        theta = init_model(arch, data.stream(seed, data.STREAM_INIT))
    else:
        raise UsageError("pass --model or --config")
    f = theta.filters
    if args.bank == "D":
        weights = f.D
    else:
        if not 0 <= args.layer < theta.config.K:
            raise UsageError(f"--layer must lie in [0, {theta.config.K - 1}]")
        weights = (f.A if args.bank == "A" else f.B)[args.layer]
    order = None
    if args.manifest:
        prof = evaluate.usage_profile(theta, _dataset(args.manifest, "test").images(),
                                      sigma=args.sigma)
        order = prof.order
        print("usage order:", " ".join(str(int(i)) for i in order))
    evaluate.export_montage(weights, order, args.out)
    print(f"montage written to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    arch = load_config(args.config).arch
    if args.tie is not None:
        from dataclasses import replace

        from .config import _tie

        try:
            arch = replace(arch, tie=_tie(args.tie))
        except ValueError as exc:
            raise UsageError(f"--tie: {exc}") from None
    if not gradcheck.within_budget(arch):
        raise UsageError(f"architecture too large for the gradient check: K*M*P^2 = "
                         f"{arch.K * arch.M * arch.P ** 2} exceeds {gradcheck.BUDGET}")
    seed = 0 if args.seed is None else args.seed
    worst = {}
    for inst in range(args.instances):
        rng = data.stream(seed, inst)
        theta = gradcheck.random_model(arch, rng)
        y, x, sigma = gradcheck.random_problem(arch, rng, args.size)
        rep = gradcheck.check_gradients(theta, y, x, sigma)
        for fam, err in rep.worst.items():
            worst[fam] = max(worst.get(fam, 0.0), err)
        print(f"instance {inst}: coordinates={rep.checked} kink_fallbacks={rep.kinks} "
              f"worst={rep.worst_overall():.3e}")
    for fam in sorted(worst):
        print(f"  {fam:<10s} worst_rel_err={worst[fam]:.3e}")
    ok = max(worst.values()) <= args.tol
    if arch.tie:
        gap = gradcheck.tied_consistency(arch, data.stream(seed, args.instances), args.size)
        tied_ok = gap <= args.tol
        print(f"tied-gradient consistency ({','.join(sorted(arch.tie))}): "
              f"rel_gap={gap:.3e} {'PASS' if tied_ok else 'FAIL'}")
        ok = ok and tied_ok
    print("PASS" if ok else "FAIL")
    if not ok:
        raise CheckFailed(f"gradient check exceeded tolerance {args.tol:g}")
    return 0


def cmd_count(args) -> int:
    arch = load_config(args.config).arch
    n = count_params(arch)
    print(n)
    pub = REFERENCE_COUNTS.get(arch)
    if pub is not None:
        ref = float(pub[:-1]) * 1000
        print(f"note: the rounded reference count for this model is {pub} "
              f"({(n - ref) / ref:+.2%}); counted here: every Gabor parameter of A and B "
              f"per layer, the parameters of D and one threshold per layer and subband")
    return 0


# --- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gdlnet", description="Gabor-parameterized unrolled sparse-coding denoiser")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--threads", type=int, default=None,
                        help="limit BLAS threads (1 guarantees bit-reproducibility)")

    sp = sub.add_parser("train", help="train a model from a config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", help="output directory (overrides [output] dir)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--quiet", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("denoise", help="denoise one grayscale image")
    sp.add_argument("--model", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--out", required=True)
    sp.add_argument("--clean", help="ground-truth image for PSNR reporting")
    common(sp)
    sp.set_defaults(func=cmd_denoise)

    sp = sub.add_parser("eval", help="PSNR sweep over test noise levels, written as CSV")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest")
    sp.add_argument("--sigmas", default="15,25,50")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=evaluate.EVAL_SEED)
    sp.add_argument("--model-id")
    sp.add_argument("--baseline", action="store_true", help="also write noisy-input rows")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("dict-viz", help="write a filter montage as PGM")
    sp.add_argument("--model")
    sp.add_argument("--config", help="visualize a fresh initialization of this architecture")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--bank", choices=("A", "B", "D"), default="D")
    sp.add_argument("--layer", type=int, default=0)
    sp.add_argument("--manifest", help="order filters by usage on these images")
    sp.add_argument("--sigma", type=float, default=25.0)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_dictviz)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    sp.add_argument("--config", default="gradcheck")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--instances", type=int, default=1)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--tie", help="override the tie set, e.g. 'alpha' or 'all'")
    common(sp)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("count-params", help="number of learnable parameters")
    sp.add_argument("--config", required=True)
    common(sp)
    sp.set_defaults(func=cmd_count)
    return p


USAGE_ERRORS = (UsageError, ConfigError, FileNotFoundError, data.ImageFormatError,
                ModelFileError, ValueError)
RUNTIME_ERRORS = (CheckFailed, NonFiniteError, ConvergenceError, FloatingPointError,
                  RuntimeError, MemoryError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _threads(args.threads):
            return args.func(args)
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
