"""Noise-tolerant learning core.

An EMA teacher network supplies pseudo labels and uncertainty estimates for
the student's training signal. Per batch: the teacher runs M stochastic
forward passes (Gaussian input noise, dropout active), the mean softmax is
the pseudo label, its per-pixel entropy is the uncertainty u, and the losses
blend plain cross-entropy against the (possibly noisy) annotation with an
MSE pull toward the pseudo label, weighted by alpha = exp(-u). The same
recipe aggregates to image level by averaging u per image.

Uncertainty enters the losses as a constant: no gradient flows through u or
alpha, only through the student logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, log_softmax_channel, softmax_channel
from .errors import ContractError, NumericError, ShapeError
from .model import MiniSegNet

# ---------------------------------------------------------------------------
# EMA teacher


@dataclass
class TeacherState:
    """Shadow copy of the student, advanced by exponential moving average."""

    net: MiniSegNet
    decay: float = 0.99
    steps: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ContractError(f"decay must be in (0,1], got {self.decay}")


def make_teacher(student: MiniSegNet, decay: float = 0.99) -> TeacherState:
    """Teacher starts as an exact copy; its parameters never join the graph."""
    return TeacherState(net=student.clone(requires_grad=False), decay=decay)


def ema_update(teacher: TeacherState, student: MiniSegNet, decay: float | None = None) -> TeacherState:
    """teacher <- decay * teacher + (1 - decay) * student, elementwise."""
    g = teacher.decay if decay is None else float(decay)
    if not 0.0 < g <= 1.0:
        raise ContractError(f"decay must be in (0,1], got {g}")
    t_params = teacher.net.named_parameters()
    s_params = student.named_parameters()
    if set(t_params) != set(s_params):
        raise ContractError("teacher/student parameter names differ")
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.data.shape != sp.data.shape:
            raise ContractError(f"{name}: teacher/student shapes differ")
        tp.data *= g
        tp.data += (1.0 - g) * sp.data
    teacher.steps += 1
    return teacher


# ---------------------------------------------------------------------------
# Monte-Carlo pseudo labels and entropy uncertainty


@dataclass
class PerturbationSpec:
    """How the teacher is perturbed for uncertainty estimation."""

    passes: int = 4
    sigma: float = 0.1
    dropout_active: bool = True

    def __post_init__(self):
        if self.passes < 1:
            raise ContractError(f"passes must be >= 1, got {self.passes}")
        if self.sigma < 0.0:
            raise ContractError(f"sigma must be nonnegative, got {self.sigma}")


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def mc_pseudo_labels(
    teacher: MiniSegNet,
    images: np.ndarray,
    spec: PerturbationSpec,
    rng: np.random.Generator | None = None,
    pass_rngs: list[np.random.Generator] | None = None,
) -> np.ndarray:
    """Mean softmax over M perturbed teacher passes; a [B,C,H,W] constant.

    Each pass adds fresh N(0, sigma^2) input noise and, when the spec says
    so, runs dropout in train mode. Per-pass generators are pre-split so the
    passes are order-independent; the mean is accumulated in pass order to
    stay bit-reproducible.
    """
    images = np.asarray(images, dtype=np.float64)
    if pass_rngs is None:
        stochastic = spec.sigma > 0.0 or spec.dropout_active
        if stochastic and rng is None:
            raise ContractError("mc_pseudo_labels needs an rng for stochastic passes")
        pass_rngs = rng.spawn(spec.passes) if rng is not None else [None] * spec.passes
    elif len(pass_rngs) != spec.passes:
        raise ContractError(f"expected {spec.passes} pass rngs, got {len(pass_rngs)}")

    total = None
    for m, pass_rng in enumerate(pass_rngs):
        if pass_rng is not None:
            noise_rng, drop_rng = pass_rng.spawn(2)
        else:
            noise_rng = drop_rng = None
        x = images
        if spec.sigma > 0.0:
            x = images + noise_rng.normal(0.0, spec.sigma, size=images.shape)
        try:
            logits = teacher.forward(
                Tensor(x), train_mode=spec.dropout_active, dropout_rng=drop_rng
            )
        except NumericError as err:
            raise NumericError(f"teacher pass {m}: {err}") from err
        probs = _softmax_np(logits.data)
        total = probs if total is None else total + probs
    return total / spec.passes


def pixel_uncertainty(probs: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Entropy of the per-pixel class distribution, [B,C,H,W] -> [B,H,W].

    0*ln(0) counts as 0. With normalize on, divides by ln(C) so u lives in
    [0,1] regardless of class count.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 4 or probs.shape[1] < 2:
        raise ShapeError(f"expected [B,C,H,W] with C >= 2, got shape {probs.shape}")
    if probs.min() < 0.0 or probs.max() > 1.0:
        raise ContractError("probabilities outside [0,1]")
    sums = probs.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ContractError("channel sums deviate from 1 by more than 1e-6")
    safe = np.where(probs > 0.0, probs, 1.0)
    u = -(probs * np.log(safe)).sum(axis=1)
    u = np.maximum(u, 0.0)
    if normalize:
        u = u / np.log(probs.shape[1])
    return u


def confidence_weight(u: np.ndarray) -> np.ndarray:
    """alpha = exp(-u): 1 where the teacher is certain, smaller where not."""
    return np.exp(-np.asarray(u, dtype=np.float64))


def image_uncertainty(u: np.ndarray) -> np.ndarray:
    """Per-image mean of pixel uncertainty, [B,H,W] -> [B]."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 3:
        raise ShapeError(f"expected [B,H,W] uncertainty, got shape {u.shape}")
    if u.min() < 0.0:
        raise ContractError("pixel uncertainty must be nonnegative")
    return u.mean(axis=(1, 2))


@dataclass
class UncertaintyBundle:
    """Everything the teacher contributes to one training step."""

    pseudo_prob: np.ndarray  # [B,C,H,W] mean teacher softmax
    pseudo_label: np.ndarray  # [B,C,H,W] soft (= pseudo_prob) or hard one-hot
    pixel_u: np.ndarray  # [B,H,W]
    pixel_alpha: np.ndarray  # [B,H,W]
    image_u: np.ndarray  # [B]
    image_alpha: np.ndarray  # [B]


def estimate_uncertainty(
    teacher: MiniSegNet,
    images: np.ndarray,
    spec: PerturbationSpec,
    rng: np.random.Generator | None,
    normalize: bool = True,
    pseudo_mode: str = "soft",
) -> UncertaintyBundle:
    if pseudo_mode not in ("soft", "hard"):
        raise ContractError(f"pseudo_mode must be soft or hard, got {pseudo_mode!r}")
    p_hat = mc_pseudo_labels(teacher, images, spec, rng)
    if pseudo_mode == "hard":
        classes = p_hat.argmax(axis=1)
        pseudo = np.eye(p_hat.shape[1])[classes].transpose(0, 3, 1, 2)
        pseudo = np.ascontiguousarray(pseudo)
    else:
        pseudo = p_hat
    u = pixel_uncertainty(p_hat, normalize=normalize)
    big_u = image_uncertainty(u)
    return UncertaintyBundle(
        pseudo_prob=p_hat,
        pseudo_label=pseudo,
        pixel_u=u,
        pixel_alpha=confidence_weight(u),
        image_u=big_u,
        image_alpha=confidence_weight(big_u),
    )


# ---------------------------------------------------------------------------
# losses


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ShapeError(f"labels must be [B,H,W], got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError(
            f"label ids must be in [0,{num_classes}), got {labels.min()}..{labels.max()}"
        )
    onehot = np.eye(num_classes, dtype=np.float64)[labels.astype(np.int64)]
    return np.ascontiguousarray(onehot.transpose(0, 3, 1, 2))


def _ce_map(logits: Tensor, labels: np.ndarray) -> Tensor:
    # per-pixel -log softmax at the annotated class, shape [B,H,W]
    onehot = _one_hot(labels, logits.shape[1])
    return -(log_softmax_channel(logits) * Tensor(onehot)).sum(axis=1)


def _mse_map(logits: Tensor, pseudo: np.ndarray) -> Tensor:
    # per-pixel squared distance between softmax and pseudo label, [B,H,W]
    pseudo = np.asarray(pseudo, dtype=np.float64)
    if pseudo.shape != logits.shape:
        raise ShapeError(f"pseudo shape {pseudo.shape} != logits shape {logits.shape}")
    diff = softmax_channel(logits) - Tensor(pseudo)
    return (diff * diff).sum(axis=1)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of student logits against integer labels."""
    return _ce_map(logits, labels).mean()


def pixel_rectified_loss(
    logits: Tensor, labels: np.ndarray, pseudo: np.ndarray, u: np.ndarray
) -> Tensor:
    """mean over pixels of alpha*CE(label) + (1-alpha)*MSE(pseudo), alpha=exp(-u).

    u is a constant: confident pixels (u=0) train on the annotation alone,
    uncertain ones lean on the teacher's pseudo label instead.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"u shape {u.shape} does not match logits {logits.shape}")
    alpha = confidence_weight(u)
    combined = Tensor(alpha) * _ce_map(logits, labels) + Tensor(1.0 - alpha) * _mse_map(
        logits, pseudo
    )
    return combined.mean()


def image_rectified_loss(
    logits: Tensor, labels: np.ndarray, pseudo: np.ndarray, image_u: np.ndarray
) -> Tensor:
    """Same blend as the pixel loss but weighted once per image by exp(-U)."""
    image_u = np.asarray(image_u, dtype=np.float64)
    if image_u.shape != (logits.shape[0],):
        raise ShapeError(f"image_u shape {image_u.shape} does not match batch {logits.shape[0]}")
    n_pix = logits.shape[2] * logits.shape[3]
    ce_i = _ce_map(logits, labels).sum(axis=(1, 2)) * (1.0 / n_pix)
    mse_i = _mse_map(logits, pseudo).sum(axis=(1, 2)) * (1.0 / n_pix)
    alpha = confidence_weight(image_u)
    return (Tensor(alpha) * ce_i + Tensor(1.0 - alpha) * mse_i).mean()
