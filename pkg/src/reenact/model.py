"""Five-stream residual classifier with a learned score-fusion head.

Each stream is an independent residual backbone (ResNet-18 topology in the
``paper`` variant, a narrow three-stage version in the ``desk`` variant)
ending in global average pooling and a 2-way linear head. The five 2-way
outputs are concatenated in stream order into a 10-d vector and mapped to the
final 2-way decision by an affine fusion layer.

Parameter names inside a stream follow the torchvision ResNet convention
(``conv1``, ``bn1``, ``layerK.B.conv1`` ...), so externally trained ResNet
weights can be imported with :func:`import_backbone_weights`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, get_dtype, no_grad

N_STREAMS = 5
N_CLASSES = 2
STREAM_NAMES = ("full_face", "top_left", "top_right", "bottom_left", "bottom_right")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (8, 16, 32)
    blocks: tuple[int, ...] = (1, 1, 1)
    resolution: int = 64
    variant: str = "desk"
    stem_kernel: int = 3
    stem_stride: int = 2
    stem_pool: bool = False
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ConfigError(f"stage widths must be positive, got {self.widths}")
        if len(self.blocks) != len(self.widths) or any(b <= 0 for b in self.blocks):
            raise ConfigError(f"blocks {self.blocks} must be positive and match widths {self.widths}")
        if self.resolution < 8:
            raise ConfigError(f"resolution must be >= 8, got {self.resolution}")
        if self.stem_kernel < 1 or self.stem_stride < 1:
            raise ConfigError("stem kernel and stride must be >= 1")

    @classmethod
    def desk(cls, **kw) -> "BackboneConfig":
        return cls(**kw)

    @classmethod
    def paper(cls) -> "BackboneConfig":
        return cls(
            widths=(64, 128, 256, 512),
            blocks=(2, 2, 2, 2),
            resolution=224,
            variant="paper",
            stem_kernel=7,
            stem_stride=2,
            stem_pool=True,
        )

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneConfig":
        variant = d.get("variant", "desk")
        base = asdict(cls.paper() if variant == "paper" else cls())
        base.update(d)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["blocks"] = list(self.blocks)
        return d

    def feature_size(self) -> int:
        """Spatial side of the final feature map for this config."""
        s = ops.conv_output_size(self.resolution, self.stem_kernel, self.stem_stride, self.stem_kernel // 2)
        if self.stem_pool:
            s = (s - 2) // 2 + 1
        for _ in self.widths[1:]:
            s = ops.conv_output_size(s, 3, 2, 1)
        return s


class Backbone:
    """One residual stream: stem, residual stages, GAP, 2-way head."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        dt = get_dtype()
        c = config

        def conv(name, cout, cin, k):
            std = math.sqrt(2.0 / (cin * k * k))
            w = rng.standard_normal((cout, cin, k, k)) * std
            self.params[f"{name}.weight"] = Tensor(w.astype(dt), requires_grad=True, name=f"{name}.weight")

        def bn(name, ch):
            self.params[f"{name}.weight"] = Tensor(np.ones(ch, dt), requires_grad=True, name=f"{name}.weight")
            self.params[f"{name}.bias"] = Tensor(np.zeros(ch, dt), requires_grad=True, name=f"{name}.bias")
            self.buffers[f"{name}.running_mean"] = np.zeros(ch, dt)
            self.buffers[f"{name}.running_var"] = np.ones(ch, dt)

        conv("conv1", c.widths[0], c.in_channels, c.stem_kernel)
        bn("bn1", c.widths[0])
        self.blocks: list[tuple[str, int, bool]] = []
        cin = c.widths[0]
        for si, (width, nblocks) in enumerate(zip(c.widths, c.blocks)):
            for bi in range(nblocks):
                stride = 2 if (si > 0 and bi == 0) else 1
                prefix = f"layer{si + 1}.{bi}"
                conv(f"{prefix}.conv1", width, cin, 3)
                bn(f"{prefix}.bn1", width)
                conv(f"{prefix}.conv2", width, width, 3)
                bn(f"{prefix}.bn2", width)
                down = stride != 1 or cin != width
                if down:
                    conv(f"{prefix}.downsample.0", width, cin, 1)
                    bn(f"{prefix}.downsample.1", width)
                self.blocks.append((prefix, stride, down))
                cin = width
        fc_std = math.sqrt(2.0 / cin)
        self.params["fc.weight"] = Tensor((rng.standard_normal((N_CLASSES, cin)) * fc_std).astype(dt), requires_grad=True, name="fc.weight")
        self.params["fc.bias"] = Tensor(np.zeros(N_CLASSES, dt), requires_grad=True, name="fc.bias")

    def _bn(self, x: Tensor, name: str, training: bool) -> Tensor:
        return ops.batch_norm2d(
            x,
            self.params[f"{name}.weight"],
            self.params[f"{name}.bias"],
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            training,
            layout="CNHW",
        )

    def features(self, x: Tensor, training: bool) -> Tensor:
        """Final residual-stage activations, channel-major ([C, N, h, w])."""
        p = self.params
        c = self.config
        xc = ops.transpose01(x)
        h = ops.conv2d(xc, p["conv1.weight"], None, stride=c.stem_stride, padding=c.stem_kernel // 2, layout="CNHW")
        h = ops.relu(self._bn(h, "bn1", training))
        if c.stem_pool:
            h = ops.max_pool2d(h, 2, 2)
        for prefix, stride, down in self.blocks:
            out = ops.conv2d(h, p[f"{prefix}.conv1.weight"], None, stride=stride, padding=1, layout="CNHW")
            out = ops.relu(self._bn(out, f"{prefix}.bn1", training))
            out = ops.conv2d(out, p[f"{prefix}.conv2.weight"], None, stride=1, padding=1, layout="CNHW")
            out = self._bn(out, f"{prefix}.bn2", training)
            if down:
                sc = ops.conv2d(h, p[f"{prefix}.downsample.0.weight"], None, stride=stride, padding=0, layout="CNHW")
                sc = self._bn(sc, f"{prefix}.downsample.1", training)
            else:
                sc = h
            h = ops.relu(out + sc)
        return h

    def head(self, features: Tensor) -> Tensor:
        return ops.linear(ops.global_avg_pool(features, layout="CNHW"), self.params["fc.weight"], self.params["fc.bias"])

    def __call__(self, x: Tensor, training: bool) -> tuple[Tensor, np.ndarray]:
        """Logits [N, 2] and the final feature maps as an NCHW array."""
        f = self.features(x, training)
        return self.head(f), np.ascontiguousarray(f.data.swapaxes(0, 1))


@dataclass
class StreamOutputs:
    stream_logits: list[Tensor]
    concatenated: Tensor
    fused_logits: Tensor
    feature_maps: list[np.ndarray] = field(default_factory=list)

    def stream_logits_array(self) -> np.ndarray:
        """Stream logits as an array of shape [N, 5, 2]."""
        return np.stack([t.data for t in self.stream_logits], axis=1)


class MultiStreamModel:
    def __init__(self, config: BackboneConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        dt = get_dtype()
        root = np.random.SeedSequence(seed)
        children = root.spawn(N_STREAMS + 1)
        self.streams = [Backbone(config, np.random.Generator(np.random.Philox(ss))) for ss in children[:N_STREAMS]]
        frng = np.random.Generator(np.random.Philox(children[N_STREAMS]))
        in_dim = N_STREAMS * N_CLASSES
        w = frng.standard_normal((N_CLASSES, in_dim)) * math.sqrt(2.0 / in_dim)
        self.fusion_weight = Tensor(w.astype(dt), requires_grad=True, name="fusion.weight")
        self.fusion_bias = Tensor(np.zeros(N_CLASSES, dt), requires_grad=True, name="fusion.bias")

    @property
    def dtype(self):
        return self.fusion_weight.dtype

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, s in enumerate(self.streams):
            for k, v in s.params.items():
                out[f"streams.{i}.{k}"] = v
        out["fusion.weight"] = self.fusion_weight
        out["fusion.bias"] = self.fusion_bias
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"streams.{i}.{k}": v for i, s in enumerate(self.streams) for k, v in s.buffers.items()}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        """Copy arrays into the model; shapes are checked before anything is written."""
        targets: dict[str, np.ndarray] = {k: v.data for k, v in self.named_parameters().items()}
        targets.update(self.named_buffers())
        for name, arr in targets.items():
            if name not in state:
                if strict:
                    raise ConfigError(f"missing parameter {name!r} in state")
                continue
            if tuple(np.shape(state[name])) != arr.shape:
                raise ConfigError(
                    f"shape mismatch for parameter {name!r}: checkpoint {tuple(np.shape(state[name]))} vs model {arr.shape}"
                )
        if strict:
            extra = sorted(set(state) - set(targets))
            if extra:
                raise ConfigError(f"unexpected parameter {extra[0]!r} in state")
        for name, arr in targets.items():
            if name in state:
                arr[...] = np.asarray(state[name], dtype=arr.dtype)

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_dict().items()}


def build_model(config: BackboneConfig, seed: int = 0) -> MultiStreamModel:
    return MultiStreamModel(config, seed)


def _as_stream_inputs(regions, resolution: int) -> list[Tensor]:
    if isinstance(regions, (list, tuple)) and len(regions) == N_STREAMS and all(isinstance(r, Tensor) for r in regions):
        xs = list(regions)
    else:
        if hasattr(regions, "as_array"):
            arr = regions.as_array()[None]
        else:
            arr = np.asarray(regions)
        if arr.ndim == 4:
            arr = arr[None]
        if arr.ndim != 5 or arr.shape[1] != N_STREAMS:
            raise ValueError(f"expected regions of shape [N, 5, C, S, S], got {arr.shape}")
        dt = get_dtype()
        xs = [Tensor(np.ascontiguousarray(arr[:, i], dtype=dt)) for i in range(N_STREAMS)]
    for x in xs:
        if x.shape[-2:] != (resolution, resolution):
            raise ValueError(f"region resolution {x.shape[-2:]} does not match model resolution {resolution}")
    return xs


def fuse(model: MultiStreamModel, concatenated: Tensor) -> Tensor:
    """Apply the fusion layer to a [N, 10] score vector."""
    return ops.linear(concatenated, model.fusion_weight, model.fusion_bias)


def forward(model: MultiStreamModel, regions, mode: str = "eval") -> StreamOutputs:
    """Run all five streams and the fusion head.

    ``regions`` is a RegionSet, an array of shape [N, 5, 3, S, S] (or
    [5, 3, S, S]), or a list of five input tensors.
    """
    training = _training(mode)
    xs = _as_stream_inputs(regions, model.config.resolution)
    logits, feats = [], []
    for stream, x in zip(model.streams, xs):
        lg, f = stream(x, training)
        logits.append(lg)
        feats.append(f)
    cat = ops.concat(logits, axis=1)
    return StreamOutputs(logits, cat, fuse(model, cat), feats)


def stream_forward(model: MultiStreamModel, i: int, image, mode: str = "eval") -> tuple[Tensor, np.ndarray]:
    """Standalone inference of stream ``i`` (1-based) on [N, 3, S, S] images."""
    if not 1 <= i <= N_STREAMS:
        raise IndexError(f"stream index must be in 1..{N_STREAMS}, got {i}")
    training = _training(mode)
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=get_dtype()))
    if x.ndim == 3:
        x = Tensor(x.data[None])
    if x.shape[-2:] != (model.config.resolution,) * 2:
        raise ValueError(f"image resolution {x.shape[-2:]} does not match model resolution {model.config.resolution}")
    return model.streams[i - 1](x, training)


def predict_arrays(model: MultiStreamModel, regions: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode stream logits [N, 5, 2] and fused logits [N, 2], no graph."""
    stream_out, fused_out = [], []
    with no_grad():
        for start in range(0, len(regions), batch_size):
            out = forward(model, regions[start:start + batch_size], mode="eval")
            stream_out.append(out.stream_logits_array())
            fused_out.append(out.fused_logits.data)
    return np.concatenate(stream_out), np.concatenate(fused_out)


def _training(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def import_backbone_weights(
    model: MultiStreamModel,
    state: Mapping[str, np.ndarray],
    streams: Iterable[int] = range(1, N_STREAMS + 1),
    skip_head: bool = True,
) -> list[str]:
    """Load externally trained single-backbone weights into the given streams.

    ``state`` uses torchvision ResNet names (``conv1.weight``,
    ``layer1.0.bn1.running_mean`` ...). The 2-way head is left at its
    initialization when ``skip_head`` is set, since pretrained classifiers
    have a different number of outputs. Returns the names that were loaded.
    """
    loaded = []
    for i in streams:
        s = model.streams[i - 1]
        for name, t in list(s.params.items()) + list(s.buffers.items()):
            if skip_head and name.startswith("fc."):
                continue
            if name not in state:
                raise ConfigError(f"pretrained state is missing {name!r}")
            arr = np.asarray(state[name])
            target = t.data if isinstance(t, Tensor) else t
            if arr.shape != target.shape:
                raise ConfigError(f"shape mismatch for parameter {name!r}: {arr.shape} vs {target.shape}")
            target[...] = arr
            loaded.append(name)
    return sorted(set(loaded))


def stream_parameter_names(model: MultiStreamModel, i: int) -> Sequence[str]:
    return [f"streams.{i - 1}.{k}" for k in model.streams[i - 1].params]
