"""Command line front end.

Subcommands: generate-data, train, eval, render, sweep. Exit codes are part
of the contract: 0 ok, 1 usage/config, 2 I/O, 3 numeric divergence, 4 bad
file format. Training runs land in a run directory with config.txt,
metrics.csv, checkpoints and a manifest enumerating every artifact with a
git-style blob sha1.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .autodiff import load_tensors
from .data import (
    NoiseSpec,
    generate_dataset,
    generate_shapes,
    load_dataset,
    normalize,
    save_dataset,
)
from .errors import (
    ConfigError,
    DataFormatError,
    DivergenceError,
    NumericError,
    PintError,
    ShapeError,
)
from .model import MiniSegNet
from .noise import PerturbationSpec, estimate_uncertainty
from .trainer import TrainConfig, evaluate, parse_flat_config, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_DIVERGENCE = 3
EXIT_FORMAT = 4

DEFAULT_STRATEGIES = ("baseline-ce", "pnt", "int", "pint")
DEFAULT_RATES = (0.25, 0.5, 0.75)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is taken by I/O here
    def error(self, message):
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# small file helpers


def blob_sha1(path) -> str:
    """Content hash matching `git hash-object` on the file."""
    payload = Path(path).read_bytes()
    h = hashlib.sha1(b"blob %d\x00" % len(payload))
    h.update(payload)
    return h.hexdigest()


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary 8-bit PGM (P5). Input is clipped and rounded to 0..255."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ShapeError(f"PGM wants a 2D array, got shape {gray.shape}")
    arr = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        fh.write(arr.tobytes())


def write_run_manifest(run_dir, inputs: dict[str, Path]) -> Path:
    """List input hashes and every artifact under the run directory."""
    run_dir = Path(run_dir)
    lines = []
    for label, p in inputs.items():
        lines.append(f"{label} = {p}")
        lines.append(f"{label}_sha1 = {blob_sha1(p)}")
    for f in sorted(run_dir.rglob("*")):
        if f.is_file() and f.name != "manifest.txt":
            rel = f.relative_to(run_dir).as_posix()
            lines.append(f"artifact {rel} sha1={blob_sha1(f)} bytes={f.stat().st_size}")
    out = run_dir / "manifest.txt"
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def _load_net(checkpoint: str, kind: str = "student") -> MiniSegNet:
    """Network from a checkpoint dir (student.pntw/teacher.pntw) or .pntw file."""
    path = Path(checkpoint)
    if path.is_dir():
        path = path / f"{kind}.pntw"
    return MiniSegNet.from_state(load_tensors(path), requires_grad=False)


# ---------------------------------------------------------------------------
# config assembly from file + flag overrides

# every TrainConfig field is overridable from the command line
_OVERRIDE_KEYS = list(TrainConfig.__dataclass_fields__)


def _add_override_flags(sub, exclude=()):
    kinds = {
        "strategy": str,
        "pseudo_mode": str,
        "widths": str,
        "teacher_dropout": str,
        "normalize_uncertainty": str,
        "lr_phase1": float,
        "lr_phase2": float,
        "momentum": float,
        "weight_decay": float,
        "ema_decay": float,
        "perturb_sigma": float,
        "dropout_rate": float,
    }
    for key in _OVERRIDE_KEYS:
        if key in exclude:
            continue
        flag = "--" + key.replace("_", "-")
        sub.add_argument(flag, dest=key, type=kinds.get(key, int), default=None)


def _build_config(args, exclude=()) -> TrainConfig:
    mapping: dict = {}
    if getattr(args, "config", None):
        mapping.update(parse_flat_config(Path(args.config).read_text(encoding="utf-8")))
    for key in _OVERRIDE_KEYS:
        if key in exclude:
            continue
        value = getattr(args, key, None)
        if value is not None:
            mapping[key] = value
    return TrainConfig.from_mapping(mapping)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate_data(args) -> int:
    noise = None
    if args.noise_rate > 0.0:
        noise = NoiseSpec(
            noise_rate=args.noise_rate,
            radius_min=args.radius_min,
            radius_max=args.radius_max,
            mode=args.noise_mode,
            seed=args.seed,
        )
    samples = generate_dataset(args.n, args.size, args.size, args.seed, noise)
    save_dataset(args.out, samples)
    corrupted = sum(1 for s in samples if s.is_corrupted)
    print(
        f"wrote {args.out}: {len(samples)} samples {args.size}x{args.size}, "
        f"{corrupted} corrupted (rate {args.noise_rate})"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    config = _build_config(args)
    train_samples = load_dataset(args.data)
    test_samples = load_dataset(args.test_data) if args.test_data else None

    result = train(
        train_samples,
        test_samples,
        config,
        out_dir=args.out,
        resume_from=args.resume,
        stop_after=args.stop_after,
    )

    inputs = {"dataset": Path(args.data)}
    if args.test_data:
        inputs["test_dataset"] = Path(args.test_data)
    write_run_manifest(args.out, inputs)

    print(f"run dir: {args.out}")
    print(f"strategy={config.strategy} iterations={config.phase1_iters + config.phase2_iters}")
    if result.records:
        last = result.records[-1]
        print(f"last eval: iter={last.iteration} loss={last.loss:.6f} dice={last.dice:.4f}")
    if result.best_iter >= 0:
        print(f"selected checkpoint: iter={result.best_iter} dice={result.best_dice:.4f}")
    if test_samples:
        ev = evaluate(result.student, test_samples)
        note = f" (asd sentinel on {ev.sentinel_hits})" if ev.sentinel_hits else ""
        print(f"selected model on test set: dice={ev.dice:.4f} asd={ev.asd:.4f}{note}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = _load_net(args.checkpoint)
    samples = load_dataset(args.data)
    ev = evaluate(net, samples)
    note = f" sentinel_hits={ev.sentinel_hits}" if ev.sentinel_hits else ""
    print(f"dice={ev.dice:.6f} asd={ev.asd:.6f}{note}")
    if args.out:
        Path(args.out).write_text(
            f"dice,asd,sentinel_hits\n{ev.dice!r},{ev.asd!r},{ev.sentinel_hits}\n",
            encoding="utf-8",
        )
    return EXIT_OK


def _scale_unit(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi - lo < 1e-12:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo) * 255.0


def cmd_render(args) -> int:
    student = _load_net(args.checkpoint, "student")
    teacher_path = Path(args.checkpoint) / "teacher.pntw"
    teacher = (
        _load_net(args.checkpoint, "teacher")
        if Path(args.checkpoint).is_dir() and teacher_path.exists()
        else student
    )
    samples = load_dataset(args.data)
    if args.indices:
        indices = [int(x) for x in args.indices.split(",")]
        bad = [i for i in indices if not 0 <= i < len(samples)]
        if bad:
            raise ConfigError(f"sample indices out of range: {bad}")
    else:
        indices = list(range(min(args.count, len(samples))))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = PerturbationSpec(passes=args.mc_passes, sigma=args.sigma, dropout_active=True)
    written = 0
    for i in indices:
        s = samples[i]
        image = normalize(s.image)[None]
        logits = student.forward(image, train_mode=False)
        pred = (logits.data.argmax(axis=1)[0] > 0).astype(np.uint8)
        bundle = estimate_uncertainty(
            teacher, image, spec, rng_mod.stream(args.seed, rng_mod.PERTURBATION, i),
            normalize=True,
        )
        stem = f"sample{i:03d}"
        write_pgm(out / f"{stem}_input.pgm", _scale_unit(s.image[0].astype(np.float64)))
        write_pgm(out / f"{stem}_clean.pgm", (s.clean_mask > 0) * 255.0)
        write_pgm(out / f"{stem}_noisy.pgm", (s.noisy_mask > 0) * 255.0)
        write_pgm(out / f"{stem}_pred.pgm", pred * 255.0)
        write_pgm(out / f"{stem}_uncertainty.pgm", bundle.pixel_u[0] * 255.0)
        noisevar = (s.clean_mask > 0) ^ (s.noisy_mask > 0)
        write_pgm(out / f"{stem}_noisevar.pgm", noisevar * 255.0)
        written += 6
    print(f"wrote {written} images for {len(indices)} samples under {out}")
    return EXIT_OK


def run_sweep(
    out_dir,
    strategies=DEFAULT_STRATEGIES,
    noise_rates=DEFAULT_RATES,
    repeats: int = 3,
    n_train: int = 80,
    n_test: int = 20,
    size: int = 32,
    base_seed: int = 0,
    radius_min: int = 2,
    radius_max: int = 5,
    config_overrides: dict | None = None,
    quiet: bool = False,
) -> list[dict]:
    """Grid of (strategy, noise rate, repeat); one failure never stops the rest.

    Per (rate, repeat) cell all strategies share the same datasets and the
    same training seed, so strategy deltas are paired. Returns one dict per
    run; also writes results.csv, summary.csv and table.txt under out_dir.
    """
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    overrides = dict(config_overrides or {})
    rows: list[dict] = []

    for rate in noise_rates:
        for rep in range(repeats):
            seed = base_seed + rep
            cell_dir = out / f"rate{rate:g}" / f"rep{rep}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            noise = (
                NoiseSpec(
                    noise_rate=rate,
                    radius_min=radius_min,
                    radius_max=radius_max,
                    seed=seed,
                )
                if rate > 0
                else None
            )
            train_samples = generate_dataset(n_train, size, size, seed, noise)
            test_samples = generate_shapes(n_test, size, size, seed + 5000)
            train_path = cell_dir / "train.pntd"
            test_path = cell_dir / "test.pntd"
            save_dataset(train_path, train_samples)
            save_dataset(test_path, test_samples)

            for strategy in strategies:
                run_dir = cell_dir / strategy
                row = {
                    "strategy": strategy,
                    "noise_rate": rate,
                    "rep": rep,
                    "seed": seed,
                    "dice": float("nan"),
                    "asd": float("nan"),
                    "error": "",
                }
                try:
                    config = TrainConfig.from_mapping(
                        {**overrides, "strategy": strategy, "seed": seed}
                    )
                    result = train(train_samples, test_samples, config, out_dir=run_dir)
                    ev = evaluate(result.student, test_samples)
                    row["dice"], row["asd"] = ev.dice, ev.asd
                    write_run_manifest(
                        run_dir, {"dataset": train_path, "test_dataset": test_path}
                    )
                except (PintError, NumericError) as err:
                    row["error"] = f"{type(err).__name__}: {err}"
                rows.append(row)
                if not quiet:
                    status = row["error"] or f"dice={row['dice']:.4f} asd={row['asd']:.4f}"
                    print(f"[sweep] rate={rate:g} rep={rep} {strategy}: {status}")

    _write_sweep_reports(out, rows, strategies, noise_rates, quiet)
    return rows


def _write_sweep_reports(out: Path, rows, strategies, noise_rates, quiet: bool) -> None:
    with open(out / "results.csv", "w", encoding="utf-8") as fh:
        fh.write("strategy,noise_rate,rep,seed,dice,asd,error\n")
        for r in rows:
            fh.write(
                f"{r['strategy']},{r['noise_rate']},{r['rep']},{r['seed']},"
                f"{r['dice']!r},{r['asd']!r},{r['error']}\n"
            )

    def cell_stats(strategy, rate):
        vals = [
            (r["dice"], r["asd"])
            for r in rows
            if r["strategy"] == strategy and r["noise_rate"] == rate and not r["error"]
        ]
        if not vals:
            return None
        d = np.array([v[0] for v in vals])
        a = np.array([v[1] for v in vals])
        return float(d.mean()), float(d.std()), float(a.mean()), float(a.std()), len(vals)

    with open(out / "summary.csv", "w", encoding="utf-8") as fh:
        fh.write("strategy,noise_rate,mean_dice,std_dice,mean_asd,std_asd,n\n")
        for s in strategies:
            for rate in noise_rates:
                st = cell_stats(s, rate)
                if st is None:
                    fh.write(f"{s},{rate},nan,nan,nan,nan,0\n")
                else:
                    fh.write(
                        f"{s},{rate},{st[0]!r},{st[1]!r},{st[2]!r},{st[3]!r},{st[4]}\n"
                    )

    width = max(len(s) for s in strategies) + 2
    lines = [
        "Dice (mean +/- std) by strategy and noise rate",
        "".join(["strategy".ljust(width)] + [f"rate={r:g}".rjust(20) for r in noise_rates]),
    ]
    for s in strategies:
        cells = [s.ljust(width)]
        for rate in noise_rates:
            st = cell_stats(s, rate)
            cells.append(
                "failed".rjust(20) if st is None else f"{st[0]:.4f} +/- {st[1]:.4f}".rjust(20)
            )
        lines.append("".join(cells))
    table = "\n".join(lines) + "\n"
    (out / "table.txt").write_text(table, encoding="utf-8")
    if not quiet:
        print(table, end="")


def cmd_sweep(args) -> int:
    overrides = {}
    if args.config:
        overrides.update(parse_flat_config(Path(args.config).read_text(encoding="utf-8")))
    for key in _OVERRIDE_KEYS:
        if key in ("strategy", "seed"):
            continue
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    strategies = tuple(s.strip() for s in args.strategies.split(","))
    rates = tuple(float(x) for x in args.noise_rates.split(","))
    run_sweep(
        args.out,
        strategies=strategies,
        noise_rates=rates,
        repeats=args.repeats,
        n_train=args.n_train,
        n_test=args.n_test,
        size=args.size,
        base_seed=args.seed,
        radius_min=args.radius_min,
        radius_max=args.radius_max,
        config_overrides=overrides,
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pintlab", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    g = subs.add_parser("generate-data", help="write a synthetic PNTD dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-rate", type=float, default=0.0)
    g.add_argument("--radius-min", type=int, default=2)
    g.add_argument("--radius-max", type=int, default=5)
    g.add_argument("--noise-mode", choices=("erode", "dilate", "random"), default="random")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    t = subs.add_parser("train", help="train one strategy into a run directory")
    t.add_argument("--data", required=True)
    t.add_argument("--test-data", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None, help="flat key=value file; flags override")
    t.add_argument("--resume", default=None, help="checkpoint dir to resume from")
    t.add_argument("--stop-after", type=int, default=None)
    _add_override_flags(t)
    t.set_defaults(func=cmd_train)

    e = subs.add_parser("eval", help="Dice/ASD of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None, help="optional CSV destination")
    e.set_defaults(func=cmd_eval)

    r = subs.add_parser("render", help="PGM images: inputs, masks, uncertainty")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--count", type=int, default=4)
    r.add_argument("--indices", default=None, help="comma-separated sample indices")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--mc-passes", type=int, default=4)
    r.add_argument("--sigma", type=float, default=0.1)
    r.set_defaults(func=cmd_render)

    s = subs.add_parser("sweep", help="grid of strategies x noise rates x repeats")
    s.add_argument("--out", required=True)
    s.add_argument("--strategies", default=",".join(DEFAULT_STRATEGIES))
    s.add_argument("--noise-rates", default=",".join(str(r) for r in DEFAULT_RATES))
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--n-train", type=int, default=80)
    s.add_argument("--n-test", type=int, default=20)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--radius-min", type=int, default=2)
    s.add_argument("--radius-max", type=int, default=5)
    s.add_argument("--config", default=None)
    _add_override_flags(s, exclude=("strategy", "seed"))
    s.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exit_:  # --help and friends
        return int(exit_.code or 0)
    try:
        return args.func(args)
    except DataFormatError as err:
        print(f"format error: {err}", file=sys.stderr)
        return EXIT_FORMAT
    except (DivergenceError, NumericError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except PintError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
