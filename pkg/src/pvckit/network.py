"""U-net of dynamic (de)convolution blocks with dense sub-blocks.

Layout for ``down_up_blocks = 4``::

    x -> D1 -> D2 -> D3 -> D4 -> U1 -> U2 -> U3 -> U4 -> 1x1x1 conv -> ReLU
                |     |     |____cat___^     ^     ^
                |     |__________cat_________|     |
                |________________cat_______________|

Each down block is an unpadded 1x3x3 convolution (H and W shrink by 2, z is
kept) followed by a dense block; each up block is the matching 1x3x3
transposed convolution followed by a dense block.  Up blocks after the first
take the channel concatenation of the previous up block and the down block
with the same spatial extent.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from pvckit.autodiff import Tensor, as_tensor, concat, relu
from pvckit.dynconv import DenseAttentionState, DynConvLayer, dynconv_forward
from pvckit.errors import ConfigError, DimensionError


@dataclass
class NetworkConfig:
    input_channels: int = 1
    filters: int = 32
    down_up_blocks: int = 4
    dense_layers_per_block: int = 2
    sampling_kernel: tuple[int, int, int] = (1, 3, 3)
    dense_kernel: tuple[int, int, int] = (5, 3, 3)
    dc_dy_enabled: bool = True
    dynamic_enabled: bool = True
    kernel_gain: float | None = None  # None: ReLU gain, doubled for dynamic layers

    def __post_init__(self):
        self.sampling_kernel = tuple(int(k) for k in self.sampling_kernel)
        self.dense_kernel = tuple(int(k) for k in self.dense_kernel)
        if self.input_channels not in (1, 2):
            raise ConfigError(f"input_channels must be 1 or 2, got {self.input_channels}")
        if self.filters < 1 or self.down_up_blocks < 1 or self.dense_layers_per_block < 0:
            raise ConfigError("filters and down_up_blocks must be >= 1, dense layers >= 0")
        if any(k % 2 == 0 for k in self.dense_kernel):
            raise ConfigError(f"dense kernel {self.dense_kernel} must have odd extents to keep shape")

    def effective_gain(self) -> float:
        """Xavier gain for the conv kernels.

        Defaults to the ReLU gain sqrt(2); dynamic layers also get a factor 2
        because the mean attention (a_spa + a_in + a_out) / 3 starts near 1/2.
        """
        if self.kernel_gain is not None:
            return float(self.kernel_gain)
        return math.sqrt(2.0) * (2.0 if self.dynamic_enabled else 1.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    def check_input(self, spatial: tuple[int, int, int]) -> None:
        """Raise :class:`ConfigError` naming the first block whose input is too small."""
        d, h, w = spatial
        kd, kh, kw = self.sampling_kernel
        if d < kd:
            raise ConfigError(f"block 1: depth {d} smaller than sampling kernel {kd}")
        for i in range(self.down_up_blocks):
            d, h, w = d - kd + 1, h - kh + 1, w - kw + 1
            if min(d, h, w) < 1:
                raise ConfigError(
                    f"down block {i + 1}: input {spatial} too small for "
                    f"{self.down_up_blocks} unpadded {self.sampling_kernel} convolutions"
                )


@dataclass
class Block:
    sampler: DynConvLayer
    dense: list[DynConvLayer]
    transition: DynConvLayer

    def layers(self) -> list[tuple[str, DynConvLayer]]:
        out = [("sample", self.sampler)]
        out += [(f"dense{j}", layer) for j, layer in enumerate(self.dense)]
        out.append(("transition", self.transition))
        return out


@dataclass
class Model:
    config: NetworkConfig
    down: list[Block]
    up: list[Block]
    head: DynConvLayer
    seed: int = 0
    _params: dict[str, Tensor] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        params: dict[str, Tensor] = {}
        for name, layer in self.named_layers():
            params.update(layer.parameters(name))
        self._params = params

    def named_layers(self) -> list[tuple[str, DynConvLayer]]:
        out = []
        for prefix, blocks in (("down", self.down), ("up", self.up)):
            for i, block in enumerate(blocks):
                out += [(f"{prefix}{i}.{n}", layer) for n, layer in block.layers()]
        out.append(("head", self.head))
        return out

    def parameters(self) -> dict[str, Tensor]:
        """Every trainable tensor exactly once, in a fixed order."""
        return dict(self._params)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def kernel_count(self) -> int:
        return int(sum(layer.weight.size for _, layer in self.named_layers()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy arrays into matching parameters; ``strict`` demands an exact name match."""
        if strict:
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            if missing or extra:
                raise ConfigError(f"state mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
        for name, p in self._params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def set_forced_attention(self, value: float | None) -> None:
        for _, layer in self.named_layers():
            layer.force_attention = value

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        n, c, *spatial = input_shape
        if c != self.config.input_channels:
            raise DimensionError(f"axis C: model takes {self.config.input_channels} channels, got {c}")
        self.config.check_input(tuple(spatial))
        return (n, 1) + tuple(spatial)

    def __call__(self, x) -> Tensor:
        return forward(self, x)


def build(config: NetworkConfig, seed: int = 0) -> Model:
    """Xavier-uniform kernels and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    f = config.filters
    dyn = config.dynamic_enabled
    g = config.effective_gain()
    dense_pad = tuple(k // 2 for k in config.dense_kernel)

    def block(c_in: int, transpose: bool) -> Block:
        sampler = DynConvLayer.create(c_in, f, config.sampling_kernel, rng, transpose=transpose, dynamic=dyn, gain=g)
        dense = [
            DynConvLayer.create(f * (j + 1), f, config.dense_kernel, rng, padding=dense_pad, dynamic=dyn, gain=g)
            for j in range(config.dense_layers_per_block)
        ]
        transition = DynConvLayer.create(f * (config.dense_layers_per_block + 1), f, (1, 1, 1), rng, dynamic=dyn, gain=g)
        return Block(sampler, dense, transition)

    down = [block(config.input_channels if i == 0 else f, False) for i in range(config.down_up_blocks)]
    up = [block(f if i == 0 else 2 * f, True) for i in range(config.down_up_blocks)]
    head = DynConvLayer.create(f, 1, (1, 1, 1), rng, dynamic=dyn, gain=g)
    return Model(config, down, up, head, seed=seed)


def _run_block(block: Block, x: Tensor, state, dc: bool):
    y, state = dynconv_forward(block.sampler, x, state, dc)
    feats = [relu(y)]
    for layer in block.dense:
        inp = feats[0] if len(feats) == 1 else concat(feats, axis=1)
        o, state = dynconv_forward(layer, inp, state, dc)
        feats.append(relu(o))
    inp = feats[0] if len(feats) == 1 else concat(feats, axis=1)
    out, state = dynconv_forward(block.transition, inp, state, dc)
    return relu(out), state


def forward(model: Model, x) -> Tensor:
    """``[N, C, D, H, W] -> [N, 1, D, H, W]``, non-negative."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise DimensionError(f"network input must be [N,C,D,H,W], got {x.shape}")
    model.output_shape(x.shape)
    dc = model.config.dc_dy_enabled
    state = DenseAttentionState(x_prev=x) if dc else None

    skips = []
    h = x
    for block in model.down:
        h, state = _run_block(block, h, state, dc)
        skips.append(h)
    for j, block in enumerate(model.up):
        if j > 0:
            h = concat([h, skips[-1 - j]], axis=1)
        h, state = _run_block(block, h, state, dc)
    out, _ = dynconv_forward(model.head, h, state, dc)
    return relu(out)
