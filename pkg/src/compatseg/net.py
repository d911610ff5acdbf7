"""CompNet: a three-level encoder-decoder over (target, conditional pairs).

The input is the channel stack ``[target image, m conditional images, m
conditional masks]``.  With the conditional head the output has ``2m`` sigmoid
channels: intersection first, extra second.  A single-head variant with ``m``
channels serves the baselines that do not use conditional supervision.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class CompNetConfig:
    m: int
    head: str = "conditional"  # "conditional" -> 2m channels, "single" -> m channels
    activation: str = "sigmoid"  # "sigmoid" or "softmax" (single head only)
    widths: tuple[int, int, int] = (16, 32, 64)
    head_bias: float = 0.0

    def __post_init__(self) -> None:
        if self.m < 2:
            raise ValueError("CompNet needs at least two classes")
        if self.head not in ("conditional", "single"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.activation not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head == "conditional" and self.activation != "sigmoid":
            raise ValueError("the conditional head uses per-channel sigmoids")

    @property
    def in_channels(self) -> int:
        return 1 + 2 * self.m

    @property
    def out_channels(self) -> int:
        return 2 * self.m if self.head == "conditional" else self.m

    def manifest(self) -> str:
        d = asdict(self)
        d["in_channels"] = self.in_channels
        d["out_channels"] = self.out_channels
        return "".join(f"{k}={v}\n" for k, v in d.items())


def _layer_shapes(cfg: CompNetConfig) -> list[tuple[str, int, int, int]]:
    w1, w2, w3 = cfg.widths
    return [
        ("enc1a", cfg.in_channels, w1, 3),
        ("enc1b", w1, w1, 3),
        ("enc2a", w1, w2, 3),
        ("enc2b", w2, w2, 3),
        ("enc3a", w2, w3, 3),
        ("enc3b", w3, w3, 3),
        ("dec2a", w3 + w2, w2, 3),
        ("dec2b", w2, w2, 3),
        ("dec1a", w2 + w1, w1, 3),
        ("dec1b", w1, w1, 3),
        ("head", w1, cfg.out_channels, 1),
    ]


def init_params(cfg: CompNetConfig, seed: int) -> Params:
    """Glorot-uniform kernels, zero biases (the head bias is ``cfg.head_bias``)."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, cin, cout, k in _layer_shapes(cfg):
        bound = np.sqrt(6.0 / (cin * k * k + cout * k * k))
        params[f"{name}.w"] = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        params[f"{name}.b"] = np.full(cout, cfg.head_bias if name == "head" else 0.0)
    return params


def params_hash(params: Params) -> str:
    h = hashlib.sha256()
    for name, arr in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def assemble_input(target_image, cond_images, cond_masks) -> Tensor:
    """Stack ``(N,H,W)`` targets with ``(N,m,H,W)`` conditional images and masks."""
    target = target_image if isinstance(target_image, Tensor) else Tensor(target_image)
    images = cond_images if isinstance(cond_images, Tensor) else Tensor(cond_images)
    cmasks = cond_masks if isinstance(cond_masks, Tensor) else Tensor(cond_masks)
    if len(target.shape) == 3:
        target = ag.take(target, (slice(None), None))
    n, _, h, w = target.shape
    if images.shape[0] != n or images.shape[2:] != (h, w) or cmasks.shape != images.shape:
        raise ValueError(
            f"input shapes disagree: target {target.shape}, images {images.shape}, masks {cmasks.shape}"
        )
    return ag.concat([target, images, cmasks], axis=1)


def _conv(p: dict[str, Tensor], name: str, x: Tensor, act: bool = True, trace: list | None = None) -> Tensor:
    y = ag.conv2d(x, p[f"{name}.w"], p[f"{name}.b"])
    if not act:
        return y
    if trace is not None:
        trace.append(np.abs(y.data).min())
    return ag.leaky_relu(y)


def _pool_gap(x: np.ndarray) -> float:
    """Smallest gap between the two largest entries of any 2x2 pooling window."""
    n, c, h, w = x.shape
    b = np.sort(x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4), axis=1)
    return float((b[:, -1] - b[:, -2]).min())


def forward_input(params: dict[str, Tensor], x: Tensor, cfg: CompNetConfig, trace: list | None = None) -> Tensor:
    """Network body on an assembled ``(N, 1+2m, H, W)`` input; returns probabilities.

    When ``trace`` is a list, the distance of every leaky-ReLU input from 0 and
    every pooling window from a tie is appended (smallest value per layer).
    """
    n, c, h, w = x.shape
    if c != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {c}")
    if h % 4 or w % 4:
        raise ValueError(f"height and width must be divisible by 4, got {h}x{w}")
    t = trace
    e1 = _conv(params, "enc1b", _conv(params, "enc1a", x, trace=t), trace=t)
    if t is not None:
        t.append(_pool_gap(e1.data))
    e2 = _conv(params, "enc2b", _conv(params, "enc2a", ag.max_pool2(e1), trace=t), trace=t)
    if t is not None:
        t.append(_pool_gap(e2.data))
    e3 = _conv(params, "enc3b", _conv(params, "enc3a", ag.max_pool2(e2), trace=t), trace=t)
    d2 = ag.concat([ag.upsample2(e3), e2], axis=1)
    d2 = _conv(params, "dec2b", _conv(params, "dec2a", d2, trace=t), trace=t)
    d1 = ag.concat([ag.upsample2(d2), e1], axis=1)
    d1 = _conv(params, "dec1b", _conv(params, "dec1a", d1, trace=t), trace=t)
    logits = _conv(params, "head", d1, act=False)
    if cfg.activation == "softmax":
        return ag.softmax(logits, axis=1)
    return ag.sigmoid(logits)


def forward(params: dict[str, Tensor] | Params, target_image, cond_images, cond_masks,
            cfg: CompNetConfig, trace: list | None = None) -> Tensor:
    """``(N, out_channels, H, W)`` probabilities for a batch of conditional bundles."""
    p = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    return forward_input(p, assemble_input(target_image, cond_images, cond_masks), cfg, trace)


def recompose_tensor(z: Tensor, m: int) -> Tensor:
    """Clipped sum of the intersection and extra channels: ``(N, m, H, W)``."""
    return ag.clip_max1(ag.add(z[:, :m], z[:, m:]))


@dataclass
class NetPair:
    """PrimNet parameters (trained) and a frozen DualNet snapshot."""

    prim: Params
    dual: Params = field(default_factory=dict)

    @classmethod
    def from_pretrained(cls, prim: Params) -> "NetPair":
        return cls(copy_params(prim), copy_params(prim))


def snapshot_sync(pair: NetPair) -> NetPair:
    """Overwrite the DualNet snapshot with an exact copy of PrimNet."""
    pair.dual = copy_params(pair.prim)
    return pair


def save_checkpoint(path: str | Path, params: Params, cfg: CompNetConfig) -> None:
    path = Path(path)
    ag.save_params(path, params)
    path.with_suffix(path.suffix + ".manifest").write_text(cfg.manifest())


def load_checkpoint(path: str | Path) -> tuple[Params, CompNetConfig]:
    path = Path(path)
    params = ag.load_params(path)
    fields: dict[str, str] = {}
    for line in path.with_suffix(path.suffix + ".manifest").read_text().splitlines():
        k, _, v = line.partition("=")
        fields[k] = v
    widths = tuple(int(x) for x in fields["widths"].strip("()").split(","))
    cfg = CompNetConfig(
        m=int(fields["m"]),
        head=fields["head"],
        activation=fields["activation"],
        widths=widths,  # type: ignore[arg-type]
        head_bias=float(fields["head_bias"]),
    )
    return params, cfg
