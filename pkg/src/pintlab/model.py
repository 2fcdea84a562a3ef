"""Small encoder-decoder segmentation network.

Three encoder widths, two max-pool downsamplings, nearest-upsample decoding
with skip connections, and two dropout sites: one after the deepest encoder
stage, one after the last decoder stage before the classification head.
Spatial dims must be divisible by 4.
"""

from __future__ import annotations

import numpy as np

from . import rng as rng_mod
from .autodiff import (
    Tensor,
    concat_channels,
    conv2d,
    dropout,
    max_pool2d,
    relu,
    upsample_nearest2x,
)
from .errors import ContractError, ShapeError


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    # He init for relu nets: N(0, 2 / fan_in), fan_in = cin * k * k
    std = np.sqrt(2.0 / (cin * k * k))
    return rng.normal(0.0, std, size=(cout, cin, k, k))


class MiniSegNet:
    """Mini U-shaped net: widths (w1,w2,w3), 3x3 convs, 2x2 pools, 1x1 head."""

    def __init__(
        self,
        seed: int | None = None,
        widths: tuple[int, int, int] = (8, 16, 32),
        num_classes: int = 2,
        dropout_rate: float = 0.5,
        _init: bool = True,
    ):
        if len(widths) != 3 or any(w < 1 for w in widths):
            raise ContractError(f"widths must be three positive ints, got {widths}")
        if num_classes < 2:
            raise ContractError(f"num_classes must be >= 2, got {num_classes}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must be in [0,1), got {dropout_rate}")
        self.widths = tuple(int(w) for w in widths)
        self.num_classes = int(num_classes)
        self.dropout_rate = float(dropout_rate)
        self._params: dict[str, Tensor] = {}
        if _init:
            if seed is None:
                raise ContractError("seed is required to initialize weights")
            self._init_weights(rng_mod.stream(seed, rng_mod.MODEL_INIT))

    # layer table: name -> (cout, cin, k)
    def _layer_specs(self):
        w1, w2, w3 = self.widths
        return [
            ("enc1", w1, 1, 3),
            ("enc2", w2, w1, 3),
            ("enc3", w3, w2, 3),
            ("mid", w3, w3, 3),
            ("dec2", w2, w3 + w2, 3),
            ("dec1", w1, w2 + w1, 3),
            ("post", w1, w1, 3),
            ("head", self.num_classes, w1, 1),
        ]

    def _init_weights(self, rng: np.random.Generator) -> None:
        # parameter names follow "stage.index.kind", index 0 = first conv of
        # the stage, so checkpoints stay stable if stages grow extra layers
        for name, cout, cin, k in self._layer_specs():
            self._params[f"{name}.0.weight"] = Tensor(
                _he_conv(rng, cout, cin, k), requires_grad=True
            )
            self._params[f"{name}.0.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            raise ContractError(f"state key mismatch: missing={missing} extra={extra}")
        for k, p in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"{k}: expected shape {p.data.shape}, got {arr.shape}")
            p.data = np.ascontiguousarray(arr)
            p.grad = None

    def clone(self, requires_grad: bool = True) -> "MiniSegNet":
        other = MiniSegNet(
            widths=self.widths,
            num_classes=self.num_classes,
            dropout_rate=self.dropout_rate,
            _init=False,
        )
        for k, p in self._params.items():
            other._params[k] = Tensor(p.data.copy(), requires_grad=requires_grad)
        return other

    @classmethod
    def from_state(
        cls,
        state: dict[str, np.ndarray],
        dropout_rate: float = 0.5,
        requires_grad: bool = True,
    ) -> "MiniSegNet":
        """Rebuild a network from saved tensors, inferring widths from shapes."""
        for key in ("enc1.0.weight", "enc2.0.weight", "enc3.0.weight", "head.0.weight"):
            if key not in state:
                raise ContractError(f"state is missing {key}")
        widths = (
            int(state["enc1.0.weight"].shape[0]),
            int(state["enc2.0.weight"].shape[0]),
            int(state["enc3.0.weight"].shape[0]),
        )
        num_classes = int(state["head.0.weight"].shape[0])
        net = cls(
            widths=widths,
            num_classes=num_classes,
            dropout_rate=dropout_rate,
            _init=False,
        )
        expected = {
            f"{name}.0.{kind}"
            for name, _, _, _ in net._layer_specs()
            for kind in ("weight", "bias")
        }
        if set(state) != expected:
            raise ContractError(
                f"state keys mismatch: missing={expected - set(state)} "
                f"extra={set(state) - expected}"
            )
        # insert in layer order so parameters() ordering matches a fresh net
        for name, _, _, _ in net._layer_specs():
            for kind in ("weight", "bias"):
                k = f"{name}.0.{kind}"
                net._params[k] = Tensor(
                    np.array(state[k], dtype=np.float64), requires_grad=requires_grad
                )
        return net

    def _conv(self, name: str, x: Tensor, padding: int) -> Tensor:
        return conv2d(
            x,
            self._params[f"{name}.0.weight"],
            self._params[f"{name}.0.bias"],
            stride=1,
            padding=padding,
        )

    def forward(
        self,
        x: Tensor | np.ndarray,
        train_mode: bool = False,
        dropout_rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Logits [B,C,H,W] for images [B,1,H,W].

        Dropout fires only in train mode; the caller supplies its rng so
        every stochastic draw stays attributable to a named stream.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected images [B,1,H,W], got {x.shape}")
        height, width = x.shape[2], x.shape[3]
        if height % 4 or width % 4:
            raise ShapeError(f"H and W must be divisible by 4, got {height}x{width}")
        if train_mode and self.dropout_rate > 0.0 and dropout_rng is None:
            raise ContractError("train-mode forward needs a dropout rng")

        e1 = relu(self._conv("enc1", x, padding=1))
        e2 = relu(self._conv("enc2", max_pool2d(e1), padding=1))
        e3 = relu(self._conv("enc3", max_pool2d(e2), padding=1))
        e3 = dropout(e3, self.dropout_rate, train_mode, dropout_rng)
        m = relu(self._conv("mid", e3, padding=1))

        d2 = relu(self._conv("dec2", concat_channels([upsample_nearest2x(m), e2]), padding=1))
        d1 = relu(self._conv("dec1", concat_channels([upsample_nearest2x(d2), e1]), padding=1))
        d1 = relu(self._conv("post", d1, padding=1))
        d1 = dropout(d1, self.dropout_rate, train_mode, dropout_rng)
        return self._conv("head", d1, padding=0)

    __call__ = forward
