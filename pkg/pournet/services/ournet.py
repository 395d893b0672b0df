"""OUR-Net: under-representation (UnNet), over-representation (OvNet) and full-resolution
fusion (FuNet) branches built from residual squeeze-and-excitation blocks.

Parameters live in a flat name -> Tensor mapping. Names follow the block structure:

    unnet.stem.conv, unnet.enc2.conv, unnet.dec1.fuse, unnet.head, ...   (P_U and UnNet)
    ovnet.*                                                              (P_O and OvNet)
    attn.u1, attn.u2, attn.o1, attn.o2                                   (attention convs)
    funet.init.*, funet.frb1..3.*, funet.head                            (P_init, P_F1..3, P_F)
    fuse.u_e3, fuse.u_d3, ..., fuse.o_e1, fuse.o_d1                      (fusion convs)

each conv contributing `<name>.weight` / `<name>.bias`, each RSEB `<name>.ex1`, `.ex2`
(convs) and `.se1`, `.se2` (dense layers).
"""

import logging
from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from pournet import seeding
from pournet.exceptions import ShapeError
from pournet.models.config import OurNetConfig
from pournet.services.tensor import (
    Tensor,
    add,
    add_n,
    concat_channels,
    conv3d,
    dense,
    global_avg_pool,
    mse,
    mul,
    parameter,
    relu,
    resample,
    scale_channels,
    sigmoid,
)

logger = logging.getLogger(__name__)

Branch = Literal["unnet", "ovnet"]

# Resolution step per level: UnNet pools first, OvNet upsamples first
_LEVEL_STEP = {"unnet": 0.5, "ovnet": 2}
# Resampling that brings a level-l feature back to input resolution
_FUSION_FACTOR = {"unnet": {1: 1, 2: 2, 3: 4}, "ovnet": {1: 1, 2: 0.5, 3: 0.25}}


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------


class _Layout:
    """Ordered parameter shapes and fan-ins for one configuration."""

    def __init__(self, se_reduction: int):
        self.se_reduction = se_reduction
        self.entries: dict[str, tuple[tuple[int, ...], int]] = {}

    def conv(self, name: str, cin: int, cout: int, k: int = 3) -> None:
        fan_in = cin * k**3
        self.entries[f"{name}.weight"] = ((cout, cin, k, k, k), fan_in)
        self.entries[f"{name}.bias"] = ((cout,), fan_in)

    def dense(self, name: str, cin: int, cout: int) -> None:
        self.entries[f"{name}.weight"] = ((cout, cin), cin)
        self.entries[f"{name}.bias"] = ((cout,), cin)

    def rseb(self, name: str, channels: int) -> None:
        reduced = max(1, channels // self.se_reduction)
        self.conv(f"{name}.ex1", channels, channels)
        self.conv(f"{name}.ex2", channels, channels)
        self.dense(f"{name}.se1", channels, reduced)
        self.dense(f"{name}.se2", reduced, channels)

    def branch(self, prefix: str, cin: int, widths: tuple[int, int, int]) -> None:
        w1, w2, w3 = widths
        self.conv(f"{prefix}.stem.conv", cin, w1)
        self.rseb(f"{prefix}.stem.rseb", w1)
        for level, (w_prev, w) in enumerate(((w1, w1), (w1, w2), (w2, w3)), start=1):
            if level > 1:
                self.conv(f"{prefix}.enc{level}.conv", w_prev, w)
            self.rseb(f"{prefix}.enc{level}.rseb0", w)
            self.rseb(f"{prefix}.enc{level}.rseb1", w)
        self.rseb(f"{prefix}.dec3.rseb0", w3)
        self.rseb(f"{prefix}.dec3.rseb1", w3)
        for level, (w_low, w) in ((2, (w3, w2)), (1, (w2, w1))):
            self.conv(f"{prefix}.dec{level}.up", w_low, w)
            self.conv(f"{prefix}.dec{level}.fuse", 2 * w, w)
            self.rseb(f"{prefix}.dec{level}.rseb0", w)
            self.rseb(f"{prefix}.dec{level}.rseb1", w)
        self.conv(f"{prefix}.head", w1, 1, k=1)


def funet_width(config: OurNetConfig) -> int:
    """Channel width of F_init and the restoration blocks."""
    width = config.base_channels
    if config.enable_unnet:
        width += config.unnet_channel_schedule[0]
    if config.enable_ovnet:
        width += config.ovnet_channel_schedule[0]
    return width


def parameter_layout(config: OurNetConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """Every parameter name with its shape and fan-in, in initialization order."""
    layout = _Layout(config.se_reduction)
    cin, c = config.in_channels, config.base_channels
    width = funet_width(config)
    branches = []
    if config.enable_unnet:
        branches.append(("unnet", "u", config.unnet_channel_schedule))
    if config.enable_ovnet:
        branches.append(("ovnet", "o", config.ovnet_channel_schedule))

    for prefix, tag, widths in branches:
        layout.branch(prefix, cin, widths)
        layout.conv(f"attn.{tag}1", widths[0], widths[0])
        layout.conv(f"attn.{tag}2", 1, widths[0])

    layout.conv("funet.init.conv", cin, c)
    layout.rseb("funet.init.rseb", c)
    for block in (1, 2, 3):
        for i in range(config.frb_rseb_count):
            layout.rseb(f"funet.frb{block}.rseb{i}", width)
    for _, tag, widths in branches:
        for level in (3, 2, 1):
            for kind in ("e", "d"):
                layout.conv(f"fuse.{tag}_{kind}{level}", widths[level - 1], width)
    layout.conv("funet.head", width, 1, k=1)
    return layout.entries


class OurNetParams:
    """All learnable blocks of one OUR-Net instance, keyed by name."""

    def __init__(self, tensors: dict[str, Tensor], config: OurNetConfig):
        self.tensors = tensors
        self.config = config

    @classmethod
    def initialize(
        cls, config: OurNetConfig, seed: int = 0, stage: int = 1, dtype=np.float32
    ) -> "OurNetParams":
        """Uniform ±sqrt(1/fan_in) initialization from the `init` sub-stream of `seed`."""
        rng = seeding.substream(seed, seeding.INIT, stage)
        tensors = {
            name: parameter(shape, fan_in, rng, dtype)
            for name, (shape, fan_in) in parameter_layout(config).items()
        }
        logger.debug(f"Initialized {len(tensors)} parameter blocks ({config.variant()})")
        return cls(tensors, config)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], config: OurNetConfig) -> "OurNetParams":
        """Wrap checkpoint arrays after checking them against the configuration's layout."""
        layout = parameter_layout(config)
        if set(arrays) != set(layout):
            missing = sorted(set(layout) - set(arrays))[:3]
            extra = sorted(set(arrays) - set(layout))[:3]
            raise ShapeError(
                f"checkpoint does not match configuration (missing {missing}, extra {extra})",
                module="ournet",
            )
        tensors = {}
        for name, (shape, _) in layout.items():
            if arrays[name].shape != shape:
                raise ShapeError(
                    f"parameter {name}: checkpoint {arrays[name].shape}, expected {shape}",
                    module="ournet",
                )
            tensors[name] = Tensor(np.array(arrays[name], dtype=np.float32), requires_grad=True)
        return cls(tensors, config)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {name: t.grad for name, t in self.tensors.items()}

    def count(self) -> int:
        """Total number of scalar parameters."""
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def astype(self, dtype) -> "OurNetParams":
        """Trainable copy in another precision (64-bit for gradient checks)."""
        tensors = {n: Tensor(t.data.astype(dtype), requires_grad=True)
                   for n, t in self.tensors.items()}
        return OurNetParams(tensors, self.config)

    def copy(self) -> "OurNetParams":
        return self.astype(next(iter(self.tensors.values())).dtype)

    def frozen(self) -> "OurNetParams":
        """View sharing the buffers but building no gradient graph."""
        return OurNetParams({n: Tensor(t.data) for n, t in self.tensors.items()}, self.config)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def conv(x: Tensor, params: OurNetParams, name: str) -> Tensor:
    """Same-padded convolution with the `<name>.weight/bias` block."""
    weight = params[f"{name}.weight"]
    return conv3d(x, weight, params[f"{name}.bias"], stride=1, padding=weight.shape[-1] // 2)


def se_layer(f: Tensor, params: OurNetParams, prefix: str) -> Tensor:
    """Channel re-calibration: f * sigmoid(dense2(relu(dense1(gap(f)))))."""
    squeezed = global_avg_pool(f)
    hidden = relu(dense(squeezed, params[f"{prefix}.se1.weight"], params[f"{prefix}.se1.bias"]))
    scale = sigmoid(dense(hidden, params[f"{prefix}.se2.weight"], params[f"{prefix}.se2.bias"]))
    return scale_channels(f, scale)


def rseb_forward(f_in: Tensor, params: OurNetParams, prefix: str) -> Tensor:
    """F_out = F_in + P_se(P_ex(F_in)), P_ex = conv -> ReLU -> conv."""
    expected = params[f"{prefix}.ex1.weight"].shape[1]
    if f_in.data.ndim != 5 or f_in.shape[1] != expected:
        raise ShapeError(
            f"RSEB {prefix} expects {expected} channels, got input {f_in.shape}", module="ournet"
        )
    features = conv(relu(conv(f_in, params, f"{prefix}.ex1")), params, f"{prefix}.ex2")
    return add(f_in, se_layer(features, params, prefix))


def _rseb_pair(x: Tensor, params: OurNetParams, prefix: str) -> Tensor:
    return rseb_forward(rseb_forward(x, params, f"{prefix}.rseb0"), params, f"{prefix}.rseb1")


def frb_forward(x: Tensor, params: OurNetParams, prefix: str, n_rseb: int) -> Tensor:
    """Full-resolution restoration block: RSEB chain with an input-to-output residual."""
    y = x
    for i in range(n_rseb):
        y = rseb_forward(y, params, f"{prefix}.rseb{i}")
    return add(x, y)


def _check_divisible(x: Tensor, module: str = "ournet") -> None:
    if x.data.ndim != 5:
        raise ShapeError(f"expected a (B, C, D, H, W) input, got {x.shape}", module=module)
    if any(n % 4 for n in x.shape[2:]):
        raise ShapeError(f"spatial extents {x.shape[2:]} must be divisible by 4", module=module)


@dataclass
class BranchFeatures:
    """Encoder/decoder features of one branch and its 1-channel head."""

    e1: Tensor
    e2: Tensor
    e3: Tensor
    d3: Tensor
    d2: Tensor
    d1: Tensor
    head: Tensor

    def level(self, kind: str, level: int) -> Tensor:
        return getattr(self, f"{kind}{level}")


def branch_forward(x_in: Tensor, branch: Branch, params: OurNetParams) -> BranchFeatures:
    """U-shaped branch. UnNet levels sit at ×1, ÷2, ÷4 resolution; OvNet at ×1, ×2, ×4.

    Decoder levels upsample (UnNet) or pool (OvNet) back, concatenate the encoder skip of
    the same level, fuse with a conv and apply two RSEBs.
    """
    _check_divisible(x_in)
    step = _LEVEL_STEP[branch]
    back = 1 / step
    p = branch

    f = rseb_forward(conv(x_in, params, f"{p}.stem.conv"), params, f"{p}.stem.rseb")
    e1 = _rseb_pair(f, params, f"{p}.enc1")
    e2 = _rseb_pair(conv(resample(e1, step), params, f"{p}.enc2.conv"), params, f"{p}.enc2")
    e3 = _rseb_pair(conv(resample(e2, step), params, f"{p}.enc3.conv"), params, f"{p}.enc3")

    d3 = _rseb_pair(e3, params, f"{p}.dec3")
    up = conv(resample(d3, back), params, f"{p}.dec2.up")
    d2 = _rseb_pair(conv(concat_channels([up, e2]), params, f"{p}.dec2.fuse"), params,
                    f"{p}.dec2")
    up = conv(resample(d2, back), params, f"{p}.dec1.up")
    d1 = _rseb_pair(conv(concat_channels([up, e1]), params, f"{p}.dec1.fuse"), params,
                    f"{p}.dec1")
    head = conv(d1, params, f"{p}.head")
    return BranchFeatures(e1, e2, e3, d3, d2, d1, head)


def attention_gate(head: Tensor, params: OurNetParams, name: str) -> Tensor:
    """sigmoid(P_2(head)): the attention map, strictly inside (0, 1)."""
    return sigmoid(conv(head, params, name))


def attention_connect(d1: Tensor, head: Tensor, params: OurNetParams, prefix: str) -> Tensor:
    """Self-attention connection d1 + P_1(d1) * sigmoid(P_2(head)); `prefix` is attn.u/attn.o."""
    if head.data.ndim != 5 or head.shape[1] != 1:
        raise ShapeError(f"attention head must have 1 channel, got {head.shape}", module="ournet")
    if head.shape[2:] != d1.shape[2:] or head.shape[0] != d1.shape[0]:
        raise ShapeError(
            f"attention operands misaligned: d1 {d1.shape}, head {head.shape}", module="ournet"
        )
    gate = attention_gate(head, params, f"{prefix}2")
    return add(d1, mul(conv(d1, params, f"{prefix}1"), gate))


def funet_forward(
    x_in: Tensor,
    u_att: Tensor | None,
    o_att: Tensor | None,
    unnet: BranchFeatures | None,
    ovnet: BranchFeatures | None,
    params: OurNetParams,
) -> Tensor:
    """F_init = {U_att, O_att, P_init(X_in)} through three FRBs, each summed with the
    branch features of one level (3, then 2, then 1) brought to input resolution.
    """
    config = params.config
    init = rseb_forward(conv(x_in, params, "funet.init.conv"), params, "funet.init.rseb")
    f = concat_channels([t for t in (u_att, o_att) if t is not None] + [init])

    def level_terms(level: int) -> list[Tensor]:
        terms = []
        for branch, tag, features in (("unnet", "u", unnet), ("ovnet", "o", ovnet)):
            if features is None:
                continue
            factor = _FUSION_FACTOR[branch][level]
            for kind in ("e", "d"):
                feature = resample(features.level(kind, level), factor)
                terms.append(conv(feature, params, f"fuse.{tag}_{kind}{level}"))
        return terms

    for block, level in ((1, 3), (2, 2), (3, 1)):
        restored = frb_forward(f, params, f"funet.frb{block}", config.frb_rseb_count)
        f = add_n([restored] + level_terms(level))
    return conv(f, params, "funet.head")


@dataclass
class OurNetOutput:
    """The three supervised heads; a disabled branch leaves its head as None."""

    x_f: Tensor
    x_u: Tensor | None = None
    x_o: Tensor | None = None
    features: dict[str, BranchFeatures] = field(default_factory=dict)

    def heads(self) -> list[Tensor]:
        return [h for h in (self.x_f, self.x_u, self.x_o) if h is not None]


def ournet_forward(x_in: Tensor, params: OurNetParams,
                   config: OurNetConfig | None = None) -> OurNetOutput:
    """Wire UnNet, OvNet, the attention connections and FuNet."""
    config = config or params.config
    _check_divisible(x_in)
    if x_in.shape[1] != config.in_channels:
        raise ShapeError(
            f"input has {x_in.shape[1]} channels, configuration expects {config.in_channels}",
            module="ournet",
        )

    unnet = branch_forward(x_in, "unnet", params) if config.enable_unnet else None
    ovnet = branch_forward(x_in, "ovnet", params) if config.enable_ovnet else None
    u_att = attention_connect(unnet.d1, unnet.head, params, "attn.u") if unnet else None
    o_att = attention_connect(ovnet.d1, ovnet.head, params, "attn.o") if ovnet else None
    x_f = funet_forward(x_in, u_att, o_att, unnet, ovnet, params)

    features = {name: f for name, f in (("unnet", unnet), ("ovnet", ovnet)) if f is not None}
    return OurNetOutput(
        x_f=x_f,
        x_u=unnet.head if unnet else None,
        x_o=ovnet.head if ovnet else None,
        features=features,
    )


def total_loss(out: OurNetOutput, x_gt: Tensor) -> Tensor:
    """Unit-weighted sum of the MSE of every present head against the target."""
    return add_n([mse(head, x_gt) for head in out.heads()])


def predict(params: OurNetParams, x: np.ndarray) -> np.ndarray:
    """Gradient-free forward pass of a (B, C, D, H, W) array; returns X_F as (B, 1, D, H, W)."""
    frozen = params.frozen()
    dtype = next(iter(frozen.tensors.values())).dtype
    return ournet_forward(Tensor(np.asarray(x, dtype=dtype)), frozen).x_f.data
