"""Six-block multi-branch conv stack with exact single-branch reparameterization.

Training form of a block::

    ReLU(BN3(conv3x3(x)) + BN1(conv1x1(x)) + BNid(x))

where the identity branch exists only for ``C_in == C_out`` and stride 1.
Because convolution is linear, each branch folds into one 3×3 kernel plus a
bias, and their sum is a single conv with the same pre-ReLU output.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as A
from . import tensor as T
from .errors import DimensionMismatch, UserInputError
from .tensor import BatchNormParams

PREFIX = "vision."
BN_FIELDS = ("gamma", "beta", "mean", "var")


@dataclass(frozen=True)
class VisionNetConfig:
    layers: tuple = ((3, 16, 2), (16, 32, 2), (32, 32, 1), (32, 64, 2), (64, 64, 1), (64, 128, 2))
    side: int = 64
    bn_eps: float = 1e-5

    def __post_init__(self):
        layers = tuple(tuple(int(v) for v in spec) for spec in self.layers)
        object.__setattr__(self, "layers", layers)
        if len(layers) != 6:
            raise UserInputError(f"vision net needs exactly 6 layers, got {len(layers)}")
        for (_, cout, _), (cin, _, _) in zip(layers, layers[1:]):
            if cout != cin:
                raise UserInputError(f"channel chain broken: {cout} -> {cin}")
        if any(s < 1 for _, _, s in layers):
            raise UserInputError("strides must be >= 1")

    @property
    def in_channels(self) -> int:
        return self.layers[0][0]

    @property
    def feature_dim(self) -> int:
        return self.layers[-1][1]

    def has_identity(self, i: int) -> bool:
        cin, cout, stride = self.layers[i]
        return cin == cout and stride == 1

    def spatial_sizes(self, side: int | None = None) -> list[int]:
        """Output side after each block."""
        s, out = side or self.side, []
        for _, _, stride in self.layers:
            s = T.out_size(s, 3, stride, 1)
            out.append(s)
        return out


@dataclass
class TrainBlockParams:
    conv3: np.ndarray
    bn3: BatchNormParams
    conv1: np.ndarray
    bn1: BatchNormParams
    bn_id: BatchNormParams | None = None
    stride: int = 1

    def __post_init__(self):
        cout, cin = self.conv3.shape[:2]
        if self.conv3.shape[2:] != (3, 3) or self.conv1.shape != (cout, cin, 1, 1):
            raise DimensionMismatch(f"bad branch kernels {self.conv3.shape} / {self.conv1.shape}")
        if self.bn3.channels != cout or self.bn1.channels != cout:
            raise DimensionMismatch("branch BN channel count != C_out")
        if self.bn_id is not None and (cin != cout or self.stride != 1 or self.bn_id.channels != cout):
            raise DimensionMismatch("identity branch needs C_in == C_out and stride 1")


@dataclass
class FusedBlockParams:
    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1


# parameter dicts ---------------------------------------------------------

def init_params(cfg: VisionNetConfig, rng: np.random.Generator, dtype=np.float32,
                random_bn: bool = False) -> dict:
    """He-initialised training-form parameters.

    ``random_bn`` draws non-trivial BN statistics and affines (for
    equivalence tests); otherwise BN starts as the identity.
    """
    p = {}
    for i, (cin, cout, _) in enumerate(cfg.layers):
        pre = f"{PREFIX}block{i}."
        p[pre + "conv3"] = (rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (9 * cin))).astype(dtype)
        p[pre + "conv1"] = (rng.standard_normal((cout, cin, 1, 1)) * np.sqrt(2.0 / cin)).astype(dtype)
        branches = ["bn3", "bn1"] + (["bnid"] if cfg.has_identity(i) else [])
        for br in branches:
            if random_bn:
                vals = dict(gamma=rng.uniform(0.5, 1.5, cout), beta=rng.normal(0, 0.2, cout),
                            mean=rng.normal(0, 0.2, cout), var=rng.uniform(0.5, 2.0, cout))
            else:
                vals = dict(gamma=np.ones(cout), beta=np.zeros(cout),
                            mean=np.zeros(cout), var=np.ones(cout))
            for f in BN_FIELDS:
                p[f"{pre}{br}.{f}"] = vals[f].astype(dtype)
    return p


def buffer_names(cfg: VisionNetConfig) -> set[str]:
    """BN running statistics: updated by averaging, not by the optimizer."""
    names = set()
    for i in range(len(cfg.layers)):
        for br in ("bn3", "bn1", "bnid"):
            names.add(f"{PREFIX}block{i}.{br}.mean")
            names.add(f"{PREFIX}block{i}.{br}.var")
    return names


def _bn_from(p, key: str, eps: float) -> BatchNormParams:
    return BatchNormParams(*(np.asarray(A.value(p[f"{key}.{f}"])) for f in BN_FIELDS), eps=eps)


def to_blocks(p, cfg: VisionNetConfig) -> list[TrainBlockParams]:
    blocks = []
    for i, (_, _, stride) in enumerate(cfg.layers):
        pre = f"{PREFIX}block{i}."
        blocks.append(TrainBlockParams(
            A.value(p[pre + "conv3"]), _bn_from(p, pre + "bn3", cfg.bn_eps),
            A.value(p[pre + "conv1"]), _bn_from(p, pre + "bn1", cfg.bn_eps),
            _bn_from(p, pre + "bnid", cfg.bn_eps) if cfg.has_identity(i) else None, stride))
    return blocks


def fused_to_dict(fused: list[FusedBlockParams]) -> dict:
    p = {}
    for i, fb in enumerate(fused):
        p[f"{PREFIX}block{i}.kernel"] = fb.kernel
        p[f"{PREFIX}block{i}.bias"] = fb.bias
    return p


def is_fused(p) -> bool:
    return f"{PREFIX}block0.kernel" in p


# forward -----------------------------------------------------------------

def _bn(x, p, key, eps, training, stats):
    if training:
        out, mu, var = A.batch_norm_train(x, p[key + ".gamma"], p[key + ".beta"], eps)
        if stats is not None:
            stats[key] = (mu, var)
        return out
    return A.batch_norm(x, p[key + ".gamma"], p[key + ".beta"],
                        A.value(p[key + ".mean"]), A.value(p[key + ".var"]), eps)


def block_forward(x, p, i: int, cfg: VisionNetConfig, training: bool = False,
                  stats: dict | None = None) -> A.Var:
    pre = f"{PREFIX}block{i}."
    stride = cfg.layers[i][2]
    if pre + "kernel" in p:
        return A.relu(A.conv2d(x, p[pre + "kernel"], p[pre + "bias"], stride=stride, pad=1))
    eps = cfg.bn_eps
    y = _bn(A.conv2d(x, p[pre + "conv3"], stride=stride, pad=1), p, pre + "bn3", eps, training, stats)
    y = y + _bn(A.conv2d(x, p[pre + "conv1"], stride=stride, pad=0), p, pre + "bn1", eps, training, stats)
    if cfg.has_identity(i):
        y = y + _bn(x, p, pre + "bnid", eps, training, stats)
    return A.relu(y)


def net_forward(x, p, cfg: VisionNetConfig, training: bool = False,
                stats: dict | None = None) -> A.Var:
    for i in range(len(cfg.layers)):
        x = block_forward(x, p, i, cfg, training, stats)
    return x


def block_forward_train(x: np.ndarray, blk: TrainBlockParams) -> np.ndarray:
    """Inference-statistics forward of one multi-branch block."""
    y = T.batch_norm_eval(T.conv2d(x, blk.conv3, None, blk.stride, 1), blk.bn3)
    y = y + T.batch_norm_eval(T.conv2d(x, blk.conv1, None, blk.stride, 0), blk.bn1)
    if blk.bn_id is not None:
        y = y + T.batch_norm_eval(x, blk.bn_id)
    return T.relu(y)


def block_forward_fused(x: np.ndarray, blk: FusedBlockParams) -> np.ndarray:
    return T.relu(T.conv2d(x, blk.kernel, blk.bias, blk.stride, 1))


def forward_blocks(x: np.ndarray, blocks) -> np.ndarray:
    for blk in blocks:
        x = block_forward_fused(x, blk) if isinstance(blk, FusedBlockParams) else block_forward_train(x, blk)
    return x


# reparameterization --------------------------------------------------------

def fold_bn(kernel: np.ndarray, bn: BatchNormParams) -> tuple[np.ndarray, np.ndarray]:
    """Absorb an inference-mode BN into the preceding bias-free conv."""
    if bn.channels != kernel.shape[0]:
        raise DimensionMismatch(f"BN has {bn.channels} channels, kernel {kernel.shape[0]} outputs")
    scale = bn.gamma / np.sqrt(bn.running_var + bn.eps)
    return kernel * scale[:, None, None, None], bn.beta - bn.running_mean * scale


def pad_1x1_to_3x3(kernel: np.ndarray) -> np.ndarray:
    return np.pad(kernel, ((0, 0), (0, 0), (1, 1), (1, 1)))


def identity_to_3x3(channels: int, dtype=np.float32) -> np.ndarray:
    k = np.zeros((channels, channels, 3, 3), dtype)
    k[np.arange(channels), np.arange(channels), 1, 1] = 1
    return k


def _f64_bn(bn: BatchNormParams) -> BatchNormParams:
    return BatchNormParams(*(np.asarray(v, np.float64) for v in
                             (bn.gamma, bn.beta, bn.running_mean, bn.running_var)), eps=bn.eps)


def fuse_block(blk: TrainBlockParams) -> FusedBlockParams:
    """Merge the branches into one 3×3 conv. Folding runs in float64 and the
    result is cast back to the kernel dtype."""
    dtype = blk.conv3.dtype
    k3, b3 = fold_bn(blk.conv3.astype(np.float64), _f64_bn(blk.bn3))
    k1, b1 = fold_bn(blk.conv1.astype(np.float64), _f64_bn(blk.bn1))
    kernel, bias = k3 + pad_1x1_to_3x3(k1), b3 + b1
    if blk.bn_id is not None:
        kid, bid = fold_bn(identity_to_3x3(blk.conv3.shape[0], np.float64), _f64_bn(blk.bn_id))
        kernel, bias = kernel + kid, bias + bid
    return FusedBlockParams(kernel.astype(dtype), bias.astype(dtype), blk.stride)


def fuse_network(blocks: list[TrainBlockParams]) -> list[FusedBlockParams]:
    return [fuse_block(b) for b in blocks]


def fuse_params(p, cfg: VisionNetConfig) -> dict:
    """Replace the training-form ``vision.*`` entries of a parameter dict."""
    out = {k: v for k, v in p.items() if not k.startswith(PREFIX)}
    out.update(fused_to_dict(fuse_network(to_blocks(p, cfg))))
    return out


# features ---------------------------------------------------------------

def frame_features(frames, p, cfg: VisionNetConfig) -> A.Var:
    """Per-frame feature vectors via global average pooling, ``n×feat``."""
    frames = A.as_var(frames) if not isinstance(frames, list) else (
        A.Var(np.stack(frames)) if frames else None)
    if frames is None or frames.shape[0] == 0:
        return A.Var(np.zeros((0, cfg.feature_dim), np.float32))
    if frames.ndim != 4 or frames.shape[1] != cfg.in_channels:
        raise DimensionMismatch(f"frames must be n×{cfg.in_channels}×H×W, got {frames.shape}")
    y = net_forward(frames, p, cfg)
    return A.mean(A.reshape(y, y.shape[:2] + (-1,)), axis=-1)


# accounting -------------------------------------------------------------

def count_params(cfg: VisionNetConfig, mode: str) -> dict:
    """Per-layer and total parameter counts (BN counts gamma, beta, mean, var)."""
    if mode not in ("train", "fused"):
        raise UserInputError(f"mode must be train|fused, got {mode!r}")
    per_layer = []
    for i, (cin, cout, _) in enumerate(cfg.layers):
        if mode == "fused":
            per_layer.append(9 * cin * cout + cout)
        else:
            n_bn = 3 if cfg.has_identity(i) else 2
            per_layer.append(9 * cin * cout + cin * cout + 4 * cout * n_bn)
    return {"per_layer": per_layer, "total": sum(per_layer)}


def count_block_params(cin: int, cout: int, stride: int, mode: str) -> int:
    if mode == "fused":
        return 9 * cin * cout + cout
    n_bn = 3 if (cin == cout and stride == 1) else 2
    return 9 * cin * cout + cin * cout + 4 * cout * n_bn


def flops(cfg: VisionNetConfig, mode: str, side: int | None = None, batch: int = 1) -> int:
    """Exact FLOPs of one forward pass; a multiply-accumulate counts as 2.

    Train form: both convs, 2 FLOPs per element per BN (scale, shift), one
    add per extra branch, no cost for ReLU. Fused form: the conv plus one
    bias add per output element.
    """
    total, s = 0, side or cfg.side
    for i, (cin, cout, stride) in enumerate(cfg.layers):
        s = T.out_size(s, 3, stride, 1)
        out_el = cout * s * s
        if mode == "fused":
            total += 2 * 9 * cin * out_el + out_el
        elif mode == "train":
            n_br = 3 if cfg.has_identity(i) else 2
            total += 2 * 9 * cin * out_el + 2 * cin * out_el + 2 * n_br * out_el + (n_br - 1) * out_el
        else:
            raise UserInputError(f"mode must be train|fused, got {mode!r}")
    return total * batch
