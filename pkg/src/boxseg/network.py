"""3D encoder-decoder segmentation network with gated skip connections.

Three encoding and three decoding units around a bridge. An encoding unit
is a convolution unit (3x3x3 conv, frozen BN, ReLU) followed by a residual
bottleneck block and a 2x2x2 max-pool; a decoding unit upsamples with a
2x2x2 transposed convolution, gates the encoder skip through an attention
block that additionally consults the encoding unit's own input (the
lower-level feature map), concatenates, and decodes with another
convolution unit + bottleneck. A 1x1x1 convolution and a sigmoid produce
the voxelwise probability map.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ArchConfig:
    base_channels: int = 8
    levels: int = 3
    attention_inter_channels_divisor: int = 2
    input_channels: int = 1
    output_channels: int = 1

    def __post_init__(self):
        if self.levels != 3:
            raise ValueError("architecture is fixed at three encoder/decoder levels")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.attention_inter_channels_divisor < 1:
            raise ValueError("attention_inter_channels_divisor must be >= 1")

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ArchConfig":
        return cls(**json.loads(Path(path).read_text()))


class BaUnet:
    """Attention U-Net with bottleneck blocks; parameters are named tensors.

    Frozen batch-norm statistics live in ``buffers`` (identity by default)
    and are saved alongside the trainable parameters.
    """

    DIVISIBILITY = 8  # three pooling stages

    def __init__(self, config: ArchConfig | None = None, dtype=np.float32, seed: int = 0):
        self.config = config or ArchConfig()
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._build(np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF))

    # -- construction ------------------------------------------------------

    def _add_param(self, name: str, shape, rng, fan_in: int):
        # He-gain uniform: keeps activation scale steady through conv+ReLU
        # stacks, which frozen identity-BN does not rescue
        bound = np.sqrt(6.0 / fan_in)
        data = rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        self.params[name] = Tensor(data, requires_grad=True)

    def _add_conv(self, name: str, in_ch: int, out_ch: int, k: int, rng, bias: bool = True):
        fan_in = in_ch * k ** 3
        self._add_param(f"{name}.w", (out_ch, in_ch, k, k, k), rng, fan_in)
        if bias:
            self.params[f"{name}.b"] = Tensor(np.zeros(out_ch, dtype=self.dtype), requires_grad=True)

    def _add_bn(self, name: str, ch: int):
        self.buffers[f"{name}.gamma"] = np.ones(ch, dtype=self.dtype)
        self.buffers[f"{name}.beta"] = np.zeros(ch, dtype=self.dtype)
        self.buffers[f"{name}.mean"] = np.zeros(ch, dtype=self.dtype)
        self.buffers[f"{name}.var"] = np.ones(ch, dtype=self.dtype)

    def _add_conv_unit(self, name: str, in_ch: int, out_ch: int, rng):
        self._add_conv(f"{name}.conv", in_ch, out_ch, 3, rng)
        self._add_bn(f"{name}.bn", out_ch)

    def _add_bottleneck(self, name: str, ch: int, rng):
        r = max(ch // 2, 1)
        self._add_conv(f"{name}.reduce", ch, r, 1, rng)
        self._add_bn(f"{name}.bn1", r)
        self._add_conv(f"{name}.conv", r, r, 3, rng)
        self._add_bn(f"{name}.bn2", r)
        self._add_conv(f"{name}.restore", r, ch, 1, rng)
        self._add_bn(f"{name}.bn3", ch)

    def _add_attention(self, name: str, skip_ch: int, gate_ch: int, lower_ch: int, rng):
        inter = max(skip_ch // self.config.attention_inter_channels_divisor, 1)
        self._add_conv(f"{name}.wg", gate_ch, inter, 1, rng)  # carries the shared bias
        self._add_conv(f"{name}.wx", skip_ch, inter, 1, rng, bias=False)
        self._add_conv(f"{name}.wl", lower_ch, inter, 1, rng, bias=False)
        self._add_conv(f"{name}.psi", inter, 1, 1, rng)

    def _build(self, rng):
        c = self.config.base_channels
        enc = [c, 2 * c, 4 * c]
        bridge = 8 * c
        in_ch = self.config.input_channels
        lower = [in_ch, enc[0], enc[1]]
        for i in range(3):
            self._add_conv_unit(f"enc{i + 1}.cu", in_ch if i == 0 else enc[i - 1], enc[i], rng)
            self._add_bottleneck(f"enc{i + 1}.bot", enc[i], rng)
        self._add_conv_unit("bridge.cu", enc[2], bridge, rng)
        self._add_bottleneck("bridge.bot", bridge, rng)
        for i in reversed(range(3)):
            # the gate is the decoder's pre-upsample feature map
            gate_ch = bridge if i == 2 else enc[i + 1]
            up_in = gate_ch
            name = f"dec{i + 1}"
            fan_in = up_in * 8
            self._add_param(f"{name}.up.w", (up_in, enc[i], 2, 2, 2), rng, fan_in)
            self._add_attention(f"{name}.att", enc[i], gate_ch, lower[i], rng)
            self._add_conv_unit(f"{name}.cu", 2 * enc[i], enc[i], rng)
            self._add_bottleneck(f"{name}.bot", enc[i], rng)
        self._add_conv_unit("head.cu", enc[0], enc[0], rng)
        self._add_bottleneck("head.bot", enc[0], rng)
        self._add_conv("head.out", enc[0], self.config.output_channels, 1, rng)
        # bias the head toward background so initial probabilities match the
        # mostly-background prior; otherwise the overlap loss inflates
        # predictions everywhere before it can suppress the background
        self.params["head.out.b"].data[:] = -2.0

    # -- forward -----------------------------------------------------------

    def _bn(self, x: Tensor, name: str) -> Tensor:
        b = self.buffers
        return ad.frozen_batchnorm(x, b[f"{name}.gamma"], b[f"{name}.beta"], b[f"{name}.mean"], b[f"{name}.var"])

    def _conv_unit(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        y = ad.conv3d(x, p[f"{name}.conv.w"], p[f"{name}.conv.b"], stride=1, padding=1)
        return ad.relu(self._bn(y, f"{name}.bn"))

    def _bottleneck(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        y = ad.conv3d(x, p[f"{name}.reduce.w"], p[f"{name}.reduce.b"])
        y = ad.relu(self._bn(y, f"{name}.bn1"))
        y = ad.conv3d(y, p[f"{name}.conv.w"], p[f"{name}.conv.b"], stride=1, padding=1)
        y = ad.relu(self._bn(y, f"{name}.bn2"))
        y = ad.conv3d(y, p[f"{name}.restore.w"], p[f"{name}.restore.b"])
        y = self._bn(y, f"{name}.bn3")
        return ad.relu(ad.add(y, x))

    def _attention(self, skip: Tensor, gate: Tensor, lower: Tensor, name: str) -> Tensor:
        p = self.params
        if skip.data.shape[2:] != lower.data.shape[2:]:
            raise ValueError("attention: skip and lower-level features must share spatial dims")
        g_up = ad.upsample_trilinear(gate, scale=2)
        if g_up.data.shape[2:] != skip.data.shape[2:]:
            raise ValueError("attention: gate spatial dims must be half of the skip's")
        a = ad.conv3d(g_up, p[f"{name}.wg.w"], p[f"{name}.wg.b"])
        a = ad.add(a, ad.conv3d(skip, p[f"{name}.wx.w"]))
        a = ad.add(a, ad.conv3d(lower, p[f"{name}.wl.w"]))
        alpha = ad.sigmoid(ad.conv3d(ad.relu(a), p[f"{name}.psi.w"], p[f"{name}.psi.b"]))
        return ad.mul(skip, alpha)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 5:
            raise ValueError("input must be N x C x D x H x W")
        if x.data.shape[1] != self.config.input_channels:
            raise ValueError(
                f"expected {self.config.input_channels} input channel(s), got {x.data.shape[1]}"
            )
        if any(dim % self.DIVISIBILITY for dim in x.data.shape[2:]):
            raise ValueError(f"spatial dims {x.data.shape[2:]} must be divisible by {self.DIVISIBILITY}")
        skips, lowers = [], []
        t = x
        for i in range(3):
            lowers.append(t)
            t = self._conv_unit(t, f"enc{i + 1}.cu")
            t = self._bottleneck(t, f"enc{i + 1}.bot")
            skips.append(t)
            t = ad.maxpool3d(t)
        t = self._conv_unit(t, "bridge.cu")
        t = self._bottleneck(t, "bridge.bot")
        for i in reversed(range(3)):
            name = f"dec{i + 1}"
            gate = t
            up = ad.conv_transpose3d(t, self.params[f"{name}.up.w"], stride=2)
            att = self._attention(skips[i], gate, lowers[i], f"{name}.att")
            t = ad.concat_channels(up, att)
            t = self._conv_unit(t, f"{name}.cu")
            t = self._bottleneck(t, f"{name}.bot")
        t = self._conv_unit(t, "head.cu")
        t = self._bottleneck(t, "head.bot")
        t = ad.conv3d(t, self.params["head.out.w"], self.params["head.out.b"])
        return ad.sigmoid(t)

    def forward_array(self, arr: np.ndarray) -> np.ndarray:
        """Inference convenience: no gradients, plain array in and out."""
        return self.forward(Tensor(np.asarray(arr, dtype=self.dtype))).data

    # -- bookkeeping ---------------------------------------------------------

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        for name, arr in self.buffers.items():
            out[f"buffer:{name}"] = arr
        return out

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.config.save(directory / "arch.json")
        ad.save_tensor_dict(directory, self.state_arrays())
        return directory

    @classmethod
    def load(cls, directory) -> "BaUnet":
        directory = Path(directory)
        config = ArchConfig.load(directory / "arch.json")
        arrays = ad.load_tensor_dict(directory)
        dtype = next(iter(arrays.values())).dtype if arrays else np.float32
        model = cls(config, dtype=dtype)
        for name, t in model.params.items():
            if name not in arrays:
                raise ValueError(f"checkpoint is missing parameter {name!r}")
            if tuple(arrays[name].shape) != t.data.shape:
                raise ValueError(
                    f"checkpoint parameter {name!r} has dims {arrays[name].shape}, expected {t.data.shape}"
                )
            t.data = arrays[name].astype(model.dtype)
        for name in model.buffers:
            key = f"buffer:{name}"
            if key in arrays:
                if tuple(arrays[key].shape) != model.buffers[name].shape:
                    raise ValueError(f"checkpoint buffer {name!r} has unexpected dims")
                model.buffers[name] = arrays[key].astype(model.dtype)
        return model
