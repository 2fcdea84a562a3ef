"""Training protocols over the noise-tolerant losses.

Four strategies share one loop:

- ``baseline-ce``: plain cross-entropy on the (noisy) annotations; the EMA
  teacher is still maintained so ablation deltas isolate the loss.
- ``pnt``: pixel-rectified loss for the whole budget, stepped lr decay.
- ``int``: image-rectified loss for the whole budget at a constant high lr,
  with best-checkpoint selection over periodic evaluations.
- ``pint``: pixel phase first (stepped decay), then the image phase continues
  the same student, teacher and optimizer at a constant lr with
  best-checkpoint selection; the phase boundary itself is a candidate.

All stochastic draws derive from (seed, tag, iteration) counter streams, so
a checkpoint only needs the iteration number to resume bit-exactly.
"""

from __future__ import annotations

import binascii
import hashlib
import json
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .autodiff import SGD, backward, load_tensors, save_tensors
from .data import SegmentationSample, batch_arrays
from .errors import (
    ConfigError,
    ContractError,
    DivergenceError,
    NumericError,
    UndefinedMetricError,
)
from .metrics import asd, dice
from .model import MiniSegNet
from .noise import (
    PerturbationSpec,
    TeacherState,
    cross_entropy_loss,
    ema_update,
    estimate_uncertainty,
    image_rectified_loss,
    make_teacher,
    pixel_rectified_loss,
)

STRATEGIES = ("baseline-ce", "pnt", "int", "pint")

CSV_HEADER = "iter,phase,loss,mean_u,mean_U,dice,asd,seconds"


@dataclass
class TrainConfig:
    """Everything that determines a run, flat enough for a key=value file."""

    strategy: str = "pint"
    phase1_iters: int = 1500
    phase2_iters: int = 500
    lr_phase1: float = 0.01
    lr_decay_every: int = 625
    lr_phase2: float = 0.01
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 0.0001
    ema_decay: float = 0.99
    mc_passes: int = 4
    perturb_sigma: float = 0.1
    teacher_dropout: bool = True
    normalize_uncertainty: bool = True
    pseudo_mode: str = "soft"
    seed: int = 0
    eval_every: int = 100
    widths: tuple = (8, 16, 32)
    num_classes: int = 2
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.phase1_iters < 0 or self.phase2_iters < 0:
            raise ConfigError("iteration counts must be nonnegative")
        if self.lr_phase1 <= 0.0 or self.lr_phase2 <= 0.0:
            raise ConfigError("learning rates must be positive")
        if self.lr_decay_every < 1:
            raise ConfigError("lr_decay_every must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0,1)")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay must be nonnegative")
        if not 0.0 < self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must be in (0,1]")
        if self.mc_passes < 1:
            raise ConfigError("mc_passes must be >= 1")
        if self.perturb_sigma < 0.0:
            raise ConfigError("perturb_sigma must be nonnegative")
        if self.pseudo_mode not in ("soft", "hard"):
            raise ConfigError("pseudo_mode must be soft or hard")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3 or any(w < 1 for w in self.widths):
            raise ConfigError("widths must be three positive ints")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0,1)")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """The long schedule: 6000 + 2000 iterations, lr decade every 2500."""
        base = dict(phase1_iters=6000, phase2_iters=2000, lr_decay_every=2500)
        base.update(overrides)
        return cls(**base)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "TrainConfig":
        defaults = cls()
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, type(getattr(defaults, key)))
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_mapping(parse_flat_config(text))

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def _coerce(key: str, raw, want: type):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if want is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if want is int:
            return int(raw)
        if want is float:
            return float(raw)
        if want is tuple:
            return tuple(int(x) for x in raw.split(","))
        return raw
    except ValueError as err:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from err


def parse_flat_config(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment; duplicates are errors."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


@dataclass
class MetricsRecord:
    """One evaluation-point row; ``lr`` is kept in memory but not in the CSV."""

    iteration: int
    phase: int
    loss: float
    mean_u: float
    mean_image_u: float
    dice: float
    asd: float
    seconds: float
    lr: float

    def csv_row(self) -> str:
        return (
            f"{self.iteration},{self.phase},{self.loss!r},{self.mean_u!r},"
            f"{self.mean_image_u!r},{self.dice!r},{self.asd!r},{self.seconds:.3f}"
        )


@dataclass
class EvalResult:
    dice: float
    asd: float
    sentinel_hits: int  # samples where ASD was undefined and the diagonal stood in


def evaluate(net: MiniSegNet, samples: list[SegmentationSample]) -> EvalResult:
    """Mean Dice/ASD of eval-mode argmax predictions against clean masks.

    Any class id > 0 counts as foreground. An empty predicted or true mask
    makes ASD undefined; the image diagonal substitutes so batch means stay
    finite, and the substitution count is reported.
    """
    if not samples:
        raise ContractError("evaluate needs at least one sample")
    images, labels = batch_arrays(samples, range(len(samples)), use_noisy=False)
    logits = net.forward(images, train_mode=False)
    pred = logits.data.argmax(axis=1)
    height, width = labels.shape[1:]
    sentinel = float(np.hypot(height, width))
    dices, asds, hits = [], [], 0
    for b in range(len(samples)):
        p, g = pred[b] > 0, labels[b] > 0
        dices.append(dice(p, g))
        try:
            asds.append(asd(p, g))
        except UndefinedMetricError:
            asds.append(sentinel)
            hits += 1
    return EvalResult(float(np.mean(dices)), float(np.mean(asds)), hits)


@dataclass
class TrainResult:
    student: MiniSegNet  # the model the strategy selects (best for int/pint)
    teacher: TeacherState
    records: list[MetricsRecord]
    best_dice: float
    best_iter: int
    final_student: MiniSegNet
    out_dir: Path | None


def _step_plan(config: TrainConfig, g: int) -> tuple[str, int, float]:
    """(loss mode, phase label, lr) for 0-based global step g."""
    decayed = config.lr_phase1 * 10.0 ** (-(g // config.lr_decay_every))
    if config.strategy == "baseline-ce":
        return "ce", 1, decayed
    if config.strategy == "pnt":
        return "pixel", 1, decayed
    if config.strategy == "int":
        return "image", 2, config.lr_phase2
    if g < config.phase1_iters:
        return "pixel", 1, decayed
    return "image", 2, config.lr_phase2


# ---------------------------------------------------------------------------
# checkpoint files


def _write_sidecar(path: Path, entries: dict) -> None:
    lines = [f"{k} = {v}" for k, v in entries.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_sidecar(path: Path) -> dict[str, str]:
    return parse_flat_config(path.read_text(encoding="utf-8"))


def write_checkpoint(
    ck_dir: Path,
    config: TrainConfig,
    student: MiniSegNet,
    teacher: TeacherState,
    optim: SGD,
    next_iter: int,
    best_dice: float,
    best_iter: int,
    best_state: dict | None,
) -> None:
    """Self-contained resumable snapshot after ``next_iter`` completed steps."""
    ck_dir = Path(ck_dir)
    ck_dir.mkdir(parents=True, exist_ok=True)
    save_tensors(ck_dir / "student.pntw", student.state())
    save_tensors(ck_dir / "teacher.pntw", teacher.net.state())
    names = list(student.named_parameters())
    save_tensors(ck_dir / "optim.pntw", dict(zip(names, optim.velocity)))
    if best_state is not None:
        save_tensors(ck_dir / "best_student.pntw", best_state)
    rng_state = binascii.hexlify(
        json.dumps({"seed": config.seed, "next_iter": next_iter}).encode()
    ).decode()
    _write_sidecar(
        ck_dir / "state.txt",
        {
            "next_iter": next_iter,
            "teacher_steps": teacher.steps,
            "best_dice": repr(best_dice),
            "best_iter": best_iter,
            "config_sha256": config.sha256(),
            "rng_state": rng_state,
        },
    )


def load_checkpoint(ck_dir: Path, config: TrainConfig) -> dict:
    """Load a checkpoint written against the same config (sha-verified)."""
    ck_dir = Path(ck_dir)
    sidecar = _read_sidecar(ck_dir / "state.txt")
    if sidecar.get("config_sha256") != config.sha256():
        raise ConfigError(
            f"{ck_dir}: checkpoint was written with a different config"
        )
    student = MiniSegNet.from_state(
        load_tensors(ck_dir / "student.pntw"),
        dropout_rate=config.dropout_rate,
        requires_grad=True,
    )
    teacher = TeacherState(
        net=MiniSegNet.from_state(
            load_tensors(ck_dir / "teacher.pntw"),
            dropout_rate=config.dropout_rate,
            requires_grad=False,
        ),
        decay=config.ema_decay,
        steps=int(sidecar["teacher_steps"]),
    )
    velocities = load_tensors(ck_dir / "optim.pntw")
    best_path = ck_dir / "best_student.pntw"
    best_state = load_tensors(best_path) if best_path.exists() else None
    return {
        "student": student,
        "teacher": teacher,
        "velocities": velocities,
        "next_iter": int(sidecar["next_iter"]),
        "best_dice": float(sidecar["best_dice"]),
        "best_iter": int(sidecar["best_iter"]),
        "best_state": best_state,
    }


class _CsvLog:
    """Append-mode metrics log, flushed per row so aborts keep their tail."""

    def __init__(self, path: Path | None, fresh: bool):
        self._fh = None
        if path is None:
            return
        exists = path.exists()
        self._fh = open(path, "w" if fresh or not exists else "a", encoding="utf-8")
        if fresh or not exists:
            self._fh.write(CSV_HEADER + "\n")
            self._fh.flush()

    def write(self, record: MetricsRecord) -> None:
        if self._fh is not None:
            self._fh.write(record.csv_row() + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# the loop


def train(
    train_samples: list[SegmentationSample],
    test_samples: list[SegmentationSample] | None,
    config: TrainConfig,
    out_dir=None,
    resume_from=None,
    init_student: MiniSegNet | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run the configured strategy; see the module docstring for the menu.

    ``out_dir`` (optional) collects config.txt, metrics.csv and checkpoints
    (init/, checkpoint/, phase1/, best/, final/). ``resume_from`` names a
    checkpoint directory written by a previous run of the same config.
    ``stop_after`` ends the run cleanly after that many total iterations,
    leaving checkpoint/ ready for resumption. ``init_student`` substitutes
    the fresh seeded network (its copy is trained, the argument is untouched).
    """
    if not train_samples:
        raise ContractError("train needs a nonempty training set")
    total = config.phase1_iters + config.phase2_iters
    early_active = config.strategy == "int" or (
        config.strategy == "pint" and config.phase2_iters > 0
    )
    if early_active and total > 0 and not test_samples:
        raise ConfigError(f"strategy {config.strategy} needs a test set for checkpoint selection")
    if stop_after is not None and stop_after < 1:
        raise ConfigError("stop_after must be >= 1")

    out = Path(out_dir) if out_dir is not None else None
    resuming = resume_from is not None

    if resuming:
        ck = load_checkpoint(Path(resume_from), config)
        student = ck["student"]
        teacher = ck["teacher"]
        optim = SGD(
            student.parameters(),
            lr=config.lr_phase1,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        names = list(student.named_parameters())
        optim.load_velocity_state([ck["velocities"][n] for n in names])
        start = ck["next_iter"]
        best_dice, best_iter, best_state = ck["best_dice"], ck["best_iter"], ck["best_state"]
    else:
        if init_student is not None:
            student = init_student.clone(requires_grad=True)
        else:
            student = MiniSegNet(
                seed=config.seed,
                widths=config.widths,
                num_classes=config.num_classes,
                dropout_rate=config.dropout_rate,
            )
        teacher = make_teacher(student, decay=config.ema_decay)
        optim = SGD(
            student.parameters(),
            lr=config.lr_phase1,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        start = 0
        best_dice, best_iter, best_state = float("-inf"), -1, None

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config.to_text(), encoding="utf-8")
        if not resuming:
            write_checkpoint(
                out / "init", config, student, teacher, optim, 0, best_dice, best_iter, None
            )
    log = _CsvLog(out / "metrics.csv" if out is not None else None, fresh=not resuming)

    pspec = PerturbationSpec(
        passes=config.mc_passes,
        sigma=config.perturb_sigma,
        dropout_active=config.teacher_dropout,
    )
    n_train = len(train_samples)
    records: list[MetricsRecord] = []
    t0 = time.perf_counter()

    def snapshot(ck_name: str, next_iter: int) -> None:
        if out is not None:
            write_checkpoint(
                out / ck_name, config, student, teacher, optim,
                next_iter, best_dice, best_iter, best_state,
            )

    try:
        for g in range(start, total):
            it = g + 1
            mode, phase, lr = _step_plan(config, g)
            optim.lr = lr
            batch_rng = rng_mod.stream(config.seed, rng_mod.BATCH, g)
            idx = batch_rng.choice(n_train, size=min(config.batch_size, n_train), replace=False)
            images, labels = batch_arrays(train_samples, idx, use_noisy=True)

            try:
                bundle = None
                if mode != "ce":
                    bundle = estimate_uncertainty(
                        teacher.net,
                        images,
                        pspec,
                        rng_mod.stream(config.seed, rng_mod.PERTURBATION, g),
                        normalize=config.normalize_uncertainty,
                        pseudo_mode=config.pseudo_mode,
                    )
                logits = student.forward(
                    images,
                    train_mode=True,
                    dropout_rng=rng_mod.stream(config.seed, rng_mod.STUDENT_DROPOUT, g),
                )
                if mode == "ce":
                    loss = cross_entropy_loss(logits, labels)
                elif mode == "pixel":
                    loss = pixel_rectified_loss(
                        logits, labels, bundle.pseudo_label, bundle.pixel_u
                    )
                else:
                    loss = image_rectified_loss(
                        logits, labels, bundle.pseudo_label, bundle.image_u
                    )
                backward(loss)
                optim.step()
                ema_update(teacher, student)
            except NumericError as err:
                # checkpoint/ still holds the last evaluated state
                raise DivergenceError(f"diverged at iteration {it}: {err}") from err

            boundary = config.strategy == "pint" and it == config.phase1_iters
            if it % config.eval_every == 0 or it == total or boundary:
                if test_samples:
                    ev = evaluate(student, test_samples)
                    dice_v, asd_v = ev.dice, ev.asd
                else:
                    dice_v, asd_v = float("nan"), float("nan")
                rec = MetricsRecord(
                    iteration=it,
                    phase=phase,
                    loss=float(loss.data),
                    mean_u=float(bundle.pixel_u.mean()) if bundle else float("nan"),
                    mean_image_u=float(bundle.image_u.mean()) if bundle else float("nan"),
                    dice=dice_v,
                    asd=asd_v,
                    seconds=time.perf_counter() - t0,
                    lr=lr,
                )
                records.append(rec)
                log.write(rec)
                candidate = config.strategy == "int" or (
                    config.strategy == "pint" and it >= config.phase1_iters
                )
                if early_active and candidate and dice_v == dice_v and dice_v > best_dice:
                    best_dice, best_iter, best_state = dice_v, it, student.state()
                    snapshot("best", it)
                if boundary:
                    snapshot("phase1", it)
                snapshot("checkpoint", it)

            if stop_after is not None and it >= stop_after and it < total:
                snapshot("checkpoint", it)
                return TrainResult(
                    student, teacher, records, best_dice, best_iter, student, out
                )

        final_student = student
        selected = student
        if early_active and best_state is not None:
            selected = MiniSegNet.from_state(
                best_state, dropout_rate=config.dropout_rate, requires_grad=True
            )
        snapshot("final", total)
        return TrainResult(
            selected, teacher, records, best_dice, best_iter, final_student, out
        )
    finally:
        log.close()
