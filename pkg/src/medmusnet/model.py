"""MedMusNet: 3-D UNet backbone, mask-enhanced decoder heads, deep supervision.

Scale index ``n`` counts halvings from full resolution: ``P[0]`` is the
full-resolution probability map, ``P[N-1]`` comes from the bottleneck.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .ops import ConvParams
from .tensor import ShapeError, Tensor


@dataclass
class ModelConfig:
    num_levels: int = 4
    base_channels: int = 8
    max_channels: Optional[int] = None  # default 10 * base_channels
    num_classes: int = 2
    in_channels: int = 1
    mem_enabled: bool = True
    lrelu_slope: float = 0.01
    patch_size: Tuple[int, int, int] = (16, 48, 64)
    norm_eps: float = 1e-5

    def __post_init__(self):
        self.patch_size = tuple(int(s) for s in self.patch_size)
        if self.num_levels < 2:
            raise ValueError("num_levels must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        f = 2 ** (self.num_levels - 1)
        if any(s % f for s in self.patch_size):
            raise ValueError(f"patch size {self.patch_size} not divisible by 2^(N-1) = {f}")

    @property
    def channel_cap(self) -> int:
        return self.max_channels if self.max_channels is not None else 10 * self.base_channels

    @property
    def channels(self) -> Tuple[int, ...]:
        return tuple(min(self.base_channels * 2**l, self.channel_cap) for l in range(self.num_levels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**dict(num_levels=4, base_channels=8, patch_size=(16, 48, 64)), **overrides})


def full_config(**overrides) -> ModelConfig:
    return ModelConfig(
        **{**dict(num_levels=6, base_channels=32, max_channels=320, patch_size=(32, 192, 256)), **overrides}
    )


class Model:
    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()})

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __call__(self, x: Tensor) -> "MultiScaleOutputs":
        return forward(self, x)


# ---------------------------------------------------------------------------
# construction


def _kaiming(rng, shape, fan_in: int, slope: float, dtype) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope**2))
    return (rng.standard_normal(shape) * (gain / np.sqrt(fan_in))).astype(dtype)


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Kaiming (fan-in, leaky-ReLU gain) initialised parameters; biases zero, norms identity."""
    rng = np.random.default_rng(seed)
    ch = config.channels
    N = config.num_levels
    C = config.num_classes
    a = config.lrelu_slope
    params: Dict[str, Tensor] = {}

    def conv(name, cout, cin, k, bias):
        params[name + ".w"] = Tensor(_kaiming(rng, (cout, cin, k, k, k), cin * k**3, a, dtype), True, name + ".w")
        if bias:
            params[name + ".b"] = Tensor(np.zeros(cout, dtype), True, name + ".b")

    def norm(name, c):
        params[name + ".g"] = Tensor(np.ones(c, dtype), True, name + ".g")
        params[name + ".b"] = Tensor(np.zeros(c, dtype), True, name + ".b")

    cin = config.in_channels
    for l in range(N):
        conv(f"enc{l}.conv0", ch[l], cin, 3, False)
        norm(f"enc{l}.norm0", ch[l])
        conv(f"enc{l}.conv1", ch[l], ch[l], 3, False)
        norm(f"enc{l}.norm1", ch[l])
        cin = ch[l]
    for l in range(N - 2, -1, -1):
        # transposed conv kernel layout (C_coarse, C_fine, 2, 2, 2)
        params[f"dec{l}.up.w"] = Tensor(
            _kaiming(rng, (ch[l + 1], ch[l], 2, 2, 2), ch[l + 1] * 8, a, dtype), True, f"dec{l}.up.w"
        )
        params[f"dec{l}.up.b"] = Tensor(np.zeros(ch[l], dtype), True, f"dec{l}.up.b")
        conv(f"dec{l}.conv0", ch[l], 2 * ch[l], 3, False)
        norm(f"dec{l}.norm0", ch[l])
        conv(f"dec{l}.conv1", ch[l], ch[l], 3, False)
        norm(f"dec{l}.norm1", ch[l])
    conv(f"head{N - 1}", C, ch[N - 1], 1, True)
    for l in range(N - 2, -1, -1):
        if config.mem_enabled:
            conv(f"mem{l}.attn3", ch[l], ch[l] + 1, 3, True)
            conv(f"mem{l}.attn1", ch[l], ch[l], 1, True)
            conv(f"mem{l}.out", C, ch[l], 1, True)
        else:
            conv(f"head{l}", C, ch[l], 1, True)
    return Model(config, params)


# ---------------------------------------------------------------------------
# forward


@dataclass
class MultiScaleOutputs:
    probs: List[Tensor]  # probs[n] at patch / 2^n
    features: List[Tensor]  # decoder features F_n (bottleneck for n = N-1)
    embeddings: Dict[int, Tensor] = field(default_factory=dict)  # E_n, MEM stages only
    attention: Dict[int, Tensor] = field(default_factory=dict)  # F^w_n, MEM stages only

    def __len__(self) -> int:
        return len(self.probs)


@dataclass
class MEMParams:
    attn3_w: Tensor
    attn3_b: Tensor
    attn1_w: Tensor
    attn1_b: Tensor
    out_w: Tensor
    out_b: Tensor

    @classmethod
    def from_model(cls, model: Model, level: int) -> "MEMParams":
        p = model.params
        return cls(*(p[f"mem{level}.{n}"] for n in ("attn3.w", "attn3.b", "attn1.w", "attn1.b", "out.w", "out.b")))


def _block(model: Model, x: Tensor, prefix: str, j: int, stride: int = 1) -> Tensor:
    p = model.params
    y = ops.conv3d(x, ConvParams(p[f"{prefix}.conv{j}.w"], None, stride, 1))
    y = ops.instance_norm(y, p[f"{prefix}.norm{j}.g"], p[f"{prefix}.norm{j}.b"], model.config.norm_eps)
    return ops.leaky_relu(y, model.config.lrelu_slope)


def _head(w: Tensor, b: Tensor, x: Tensor) -> Tensor:
    return ops.softmax_channels(ops.conv3d(x, ConvParams(w, b)))


def mem_forward(p_coarse: Tensor, f_fine: Tensor, mp: MEMParams, check_tol: float = 1e-4):
    """Gate the finer decoder features with the coarser probability map.

    Returns ``(P_fine, E, F_w)``.
    """
    if p_coarse.ndim != 5 or f_fine.ndim != 5:
        raise ShapeError("mem_forward expects 5-D tensors")
    if tuple(2 * s for s in p_coarse.shape[2:]) != f_fine.shape[2:] or p_coarse.shape[0] != f_fine.shape[0]:
        raise ShapeError(f"mem_forward: coarse {p_coarse.shape} is not half of fine {f_fine.shape}")
    sums = p_coarse.data.sum(axis=1)
    if np.any(p_coarse.data < -check_tol) or np.abs(sums - 1).max() > check_tol:
        raise ValueError("mem_forward: coarse map is not a probability map")
    fg = ops.channel_sum(p_coarse, 1)
    fg = ops.upsample(fg, "trilinear")
    e = ops.concat_channels(f_fine, fg)
    fw = ops.conv3d(e, ConvParams(mp.attn3_w, mp.attn3_b, 1, 1))
    fw = ops.conv3d(fw, ConvParams(mp.attn1_w, mp.attn1_b))
    gated = ops.elementwise_mul(f_fine, ops.softmax_channels(fw))
    p_fine = _head(mp.out_w, mp.out_b, gated)
    return p_fine, e, fw


def forward(model: Model, x: Tensor) -> MultiScaleOutputs:
    cfg = model.config
    N = cfg.num_levels
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected (B, {cfg.in_channels}, D, H, W), got {x.shape}")
    if tuple(x.shape[2:]) != cfg.patch_size:
        raise ShapeError(f"input spatial dims {x.shape[2:]} != patch size {cfg.patch_size}")
    p = model.params
    skips = []
    h = x
    for l in range(N):
        h = _block(model, h, f"enc{l}", 0, stride=1 if l == 0 else 2)
        h = _block(model, h, f"enc{l}", 1)
        skips.append(h)
    feats: List[Optional[Tensor]] = [None] * N
    feats[N - 1] = h
    for l in range(N - 2, -1, -1):
        up = ops.conv_transpose3d(h, ConvParams(p[f"dec{l}.up.w"], p[f"dec{l}.up.b"], 2, 0))
        h = ops.concat_channels(skips[l], up)
        h = _block(model, h, f"dec{l}", 0)
        h = _block(model, h, f"dec{l}", 1)
        feats[l] = h
    probs: List[Optional[Tensor]] = [None] * N
    probs[N - 1] = _head(p[f"head{N - 1}.w"], p[f"head{N - 1}.b"], feats[N - 1])
    out = MultiScaleOutputs(probs, feats)  # type: ignore[arg-type]
    for l in range(N - 2, -1, -1):
        if cfg.mem_enabled:
            probs[l], out.embeddings[l], out.attention[l] = mem_forward(
                probs[l + 1], feats[l], MEMParams.from_model(model, l)
            )
        else:
            probs[l] = _head(p[f"head{l}.w"], p[f"head{l}.b"], feats[l])
    return out


# ---------------------------------------------------------------------------
# deep supervision


def scale_weights(n_scales: int) -> np.ndarray:
    """Weights 2^-n normalised to sum to one."""
    w = np.array([2.0**-n for n in range(n_scales)])
    return w / w.sum()


def downsample_labels(gt: np.ndarray, mode: str = "nearest") -> np.ndarray:
    """Halve (B, D, H, W) labels. ``max`` keeps any foreground in the 2x2x2 block."""
    if mode == "nearest":
        return np.ascontiguousarray(gt[:, ::2, ::2, ::2])
    if mode == "max":
        B, D, H, W = gt.shape
        return gt.reshape(B, D // 2, 2, H // 2, 2, W // 2, 2).max(axis=(2, 4, 6))
    raise ValueError(f"unknown label downsampling {mode!r}")


def label_pyramid(gt: np.ndarray, n_scales: int, mode: str = "nearest") -> List[np.ndarray]:
    out = [np.asarray(gt)]
    for _ in range(1, n_scales):
        out.append(downsample_labels(out[-1], mode))
    return out


@dataclass
class LossBreakdown:
    total: Tensor
    per_scale: List[float]
    weights: np.ndarray

    @property
    def value(self) -> float:
        return float(self.total.data)


def deep_supervision_loss(
    outputs: MultiScaleOutputs,
    gt: np.ndarray,
    num_classes: Optional[int] = None,
    dice_eps: float = 1e-5,
    label_mode: str = "nearest",
) -> LossBreakdown:
    """Weighted Dice + cross-entropy over all output scales.

    ``gt`` holds integer labels of shape (B, D, H, W) at full resolution.
    """
    probs = outputs.probs
    C = num_classes or probs[0].shape[1]
    gt = np.asarray(gt)
    if gt.ndim == 3:
        gt = gt[None]
    if gt.shape != (probs[0].shape[0],) + tuple(probs[0].shape[2:]):
        raise ShapeError(f"ground truth {gt.shape} does not match full-resolution output {probs[0].shape}")
    if gt.size and (gt.min() < 0 or gt.max() >= C):
        raise ValueError(f"labels outside 0..{C - 1}")
    weights = scale_weights(len(probs))
    pyramid = label_pyramid(gt, len(probs), label_mode)
    total = None
    per_scale = []
    for n, (pn, gn) in enumerate(zip(probs, pyramid)):
        target = ops.one_hot(gn, C, dtype=pn.dtype)
        ln = ops.add(ops.dice_loss(pn, target, dice_eps), ops.ce_loss(pn, target))
        per_scale.append(float(ln.data))
        term = ops.scale(ln, float(weights[n]))
        total = term if total is None else ops.add(total, term)
    return LossBreakdown(total, per_scale, weights)
