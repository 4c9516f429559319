"""U-Net builders: vanilla, relation (two inputs, four heads) and dropout variants.

All three share one trunk layout. The relation variant concatenates its two
inputs along the channel axis and ends in four independent 1x1 heads; the
dropout variant drops units of the decoder's final feature map before its
single head.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, UsageError
from .tensor import Tensor

VARIANTS = ("vanilla", "relation", "vanilla_dropout")
RELATION_HEADS = ("s1", "s2", "rp", "rc")


@dataclass(frozen=True)
class ModelConfig:
    in_channels_per_image: int = 1
    base_channels: int = 8
    depth: int = 3
    input_size: Tuple[int, int] = (32, 32)
    variant: str = "relation"
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.in_channels_per_image < 1 or self.base_channels < 1 or self.depth < 1:
            raise ConfigError("in_channels_per_image, base_channels and depth must be positive")
        h, w = self.input_size
        step = 2 ** self.depth
        if h <= 0 or w <= 0 or h % step or w % step:
            raise ConfigError(f"input size {h}x{w} is not divisible by 2^depth = {step}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def network_in_channels(self) -> int:
        factor = 2 if self.variant == "relation" else 1
        return factor * self.in_channels_per_image

    @property
    def head_names(self) -> Tuple[str, ...]:
        return RELATION_HEADS if self.variant == "relation" else ("s",)

    def to_text(self) -> str:
        """Flat key=value block; parsed back exactly by :meth:`from_text`."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "input_size":
                value = f"{value[0]}x{value[1]}"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        raw = parse_key_values(text)
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            value = raw.pop(f.name)
            kwargs[f.name] = _convert_field(f.name, value)
        if raw:
            raise ConfigError(f"unknown model config keys: {sorted(raw)}")
        return cls(**kwargs)


def parse_key_values(text: str) -> Dict[str, str]:
    """Parse a flat ``key=value`` text block; ``#`` starts a comment line."""
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_size(text: str) -> Tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2 or not all(p.isdigit() for p in parts):
        raise ConfigError(f"size must look like HxW, got {text!r}")
    return int(parts[0]), int(parts[1])


def _convert_field(name: str, value: str):
    try:
        if name == "input_size":
            return parse_size(value)
        if name == "variant":
            return value
        if name == "dropout_rate":
            return float(value)
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc


@dataclass
class ModelOutputs:
    s1_logits: Optional[Tensor] = None
    s2_logits: Optional[Tensor] = None
    rp_logits: Optional[Tensor] = None
    rc_logits: Optional[Tensor] = None
    s_logits: Optional[Tensor] = None

    def heads(self) -> Dict[str, Tensor]:
        names = ("s1", "s2", "rp", "rc", "s")
        return {n: getattr(self, f"{n}_logits") for n in names if getattr(self, f"{n}_logits") is not None}


@dataclass
class Network:
    config: ModelConfig
    params: Dict[str, Tensor]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    def flat_grads(self) -> np.ndarray:
        return np.concatenate([
            (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
            for p in self.params.values()
        ])

    def load_flat(self, vector: np.ndarray) -> None:
        offset = 0
        for p in self.params.values():
            size = p.data.size
            p.data = vector[offset:offset + size].reshape(p.data.shape).copy()
            offset += size


def layer_specs(config: ModelConfig) -> List[Tuple[str, int, int, int]]:
    """Ordered (name, in_channels, out_channels, kernel) for every conv."""
    specs = []
    chans = [config.base_channels * 2 ** i for i in range(config.depth + 1)]
    prev = config.network_in_channels
    for level in range(config.depth):
        specs.append((f"enc{level}.conv1", prev, chans[level], 3))
        specs.append((f"enc{level}.conv2", chans[level], chans[level], 3))
        prev = chans[level]
    specs.append(("bottleneck.conv1", prev, chans[-1], 3))
    specs.append(("bottleneck.conv2", chans[-1], chans[-1], 3))
    for level in reversed(range(config.depth)):
        specs.append((f"dec{level}.up", chans[level + 1], chans[level], 3))
        specs.append((f"dec{level}.conv1", 2 * chans[level], chans[level], 3))
        specs.append((f"dec{level}.conv2", chans[level], chans[level], 3))
    for head in config.head_names:
        specs.append((f"head_{head}", config.base_channels, 1, 1))
    return specs


def build_model(config: ModelConfig, rng_seed: int) -> Network:
    """He-initialised network; identical (config, seed) gives identical weights."""
    rng = np.random.default_rng(rng_seed)
    params: Dict[str, Tensor] = {}
    for name, cin, cout, k in layer_specs(config):
        fan_in = cin * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
    return Network(config, params)


def _conv(net: Network, name: str, x: Tensor, activate: bool = True) -> Tensor:
    w = net.params[f"{name}.weight"]
    pad = w.shape[-1] // 2
    y = T.conv2d(x, w, net.params[f"{name}.bias"], padding=pad)
    return T.relu(y) if activate else y


def _trunk(net: Network, x: Tensor) -> Tensor:
    cfg = net.config
    n, c, h, w = x.shape
    if c != cfg.network_in_channels or (h, w) != tuple(cfg.input_size):
        raise DimensionError(
            f"network expects {cfg.network_in_channels}x{cfg.input_size[0]}x{cfg.input_size[1]} input, got {c}x{h}x{w}")
    skips = []
    for level in range(cfg.depth):
        x = _conv(net, f"enc{level}.conv1", x)
        x = _conv(net, f"enc{level}.conv2", x)
        skips.append(x)
        x = T.max_pool2(x)
    x = _conv(net, "bottleneck.conv1", x)
    x = _conv(net, "bottleneck.conv2", x)
    for level in reversed(range(cfg.depth)):
        x = _conv(net, f"dec{level}.up", T.upsample_nearest2(x))
        x = T.concat_channels(skips[level], x)
        x = _conv(net, f"dec{level}.conv1", x)
        x = _conv(net, f"dec{level}.conv2", x)
    return x


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def forward_relation(net: Network, x1, x2, train_mode: bool = False) -> ModelOutputs:
    """Four-head forward pass. The graph is recorded only when ``train_mode``."""
    if net.config.variant != "relation":
        raise UsageError(f"forward_relation needs a relation network, got {net.config.variant}")
    x1, x2 = _as_input(x1), _as_input(x2)
    if x1.shape != x2.shape:
        raise DimensionError(f"paired inputs differ in shape: {x1.shape} vs {x2.shape}")
    if train_mode:
        return _relation_heads(net, x1, x2)
    with T.no_grad():
        return _relation_heads(net, x1, x2)


def _relation_heads(net: Network, x1: Tensor, x2: Tensor) -> ModelOutputs:
    feats = _trunk(net, T.concat_channels(x1, x2))
    heads = {h: _conv(net, f"head_{h}", feats, activate=False) for h in RELATION_HEADS}
    return ModelOutputs(s1_logits=heads["s1"], s2_logits=heads["s2"],
                        rp_logits=heads["rp"], rc_logits=heads["rc"])


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1/(1-rate)."""
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def forward_vanilla(net: Network, x, train_mode: bool = False,
                    rng: Optional[np.random.Generator] = None) -> Tensor:
    """Single-head logits. Dropout (dropout variant) is sampled only when ``rng`` is given."""
    if net.config.variant == "relation":
        raise UsageError("forward_vanilla needs a vanilla or vanilla_dropout network")
    x = _as_input(x)

    def run() -> Tensor:
        feats = _trunk(net, x)
        if net.config.variant == "vanilla_dropout" and rng is not None and net.config.dropout_rate > 0:
            feats = T.mask_scale(feats, dropout_mask(feats.shape, net.config.dropout_rate, rng))
        return _conv(net, "head_s", feats, activate=False)

    if train_mode:
        return run()
    with T.no_grad():
        return run()


def forward_dropout(net: Network, x, sample: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Dropout-variant logits; ``sample`` draws a fresh Bernoulli mask from ``rng``."""
    if net.config.variant != "vanilla_dropout":
        raise UsageError(f"forward_dropout needs a vanilla_dropout network, got {net.config.variant}")
    if sample and rng is None:
        raise UsageError("sampling dropout needs an rng")
    return forward_vanilla(net, x, rng=rng if sample else None)
