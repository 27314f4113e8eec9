"""Spatiotemporal encoder / 1-D decoder networks with intermediate-feature taps.

Teacher encoders come in three flavors (plain 3-D convolutions, a single-stream
inception-style variant, and a factorized spatial+temporal variant); the
compact model shares the decoder design. All networks map a pressure video
(batch, 2, t, 16, 8) to a force series (batch, 2, t) and expose five named
taps: E1/E2 inside the encoder, Mid (the latent), D1/D2 inside the decoder.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .datagen import GRID_COLS, GRID_ROWS

ENCODER_KINDS = ("c3d", "i3d", "r2plus1d")
SCALES = ("teacher", "student")
TAP_NAMES = ("E1", "E2", "Mid", "D1", "D2")


@dataclass(frozen=True)
class NetworkSpec:
    encoder_kind: str = "c3d"
    scale: str = "teacher"
    mid_channels: int = 64
    temporal_stride_total: int = 4
    out_channels: int = 2
    window: int = 200

    def __post_init__(self):
        if self.encoder_kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder_kind {self.encoder_kind!r}; use one of {ENCODER_KINDS}")
        if self.scale not in SCALES:
            raise ValueError(f"unknown scale {self.scale!r}")
        if self.temporal_stride_total != 4:
            raise ValueError("only a total temporal stride of 4 is supported")
        if self.window % self.temporal_stride_total:
            raise ValueError("window must be divisible by the total temporal stride")


@dataclass
class TapBundle:
    """Named intermediate features from one forward pass."""

    E1: torch.Tensor  # (b, c1, t1, h1, w1)
    E2: torch.Tensor  # (b, mid, t/4, h2, w2)
    Mid: torch.Tensor  # (b, mid, t/4)
    D1: torch.Tensor  # (b, 32, t/2)
    D2: torch.Tensor  # (b, 16, t)
    y_hat: torch.Tensor  # (b, 2, t)

    def get(self, name: str) -> torch.Tensor:
        if name not in TAP_NAMES:
            raise KeyError(f"unknown tap {name!r}; taps are {TAP_NAMES}")
        return getattr(self, name)


def _scaled(base: int, mid_channels: int) -> int:
    """Scale a reference channel width by mid_channels / 64, keeping >= 2."""
    return max(2, int(round(base * mid_channels / 64)))


def _gn(channels: int) -> nn.GroupNorm:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    raise AssertionError("unreachable")


def _conv_block(c_in: int, c_out: int, temporal_stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, kernel_size=3, padding=1, stride=(temporal_stride, 1, 1)),
        _gn(c_out),
        nn.ReLU(inplace=True),
    )


class C3DEncoder(nn.Module):
    """Four blocks of plain 3x3x3 convolutions; reference widths 32/64/112."""

    def __init__(self, mid_channels: int):
        super().__init__()
        w1, w2, w3 = (_scaled(w, mid_channels) for w in (32, 64, 112))
        # temporal stride 4 total: 2 in the first convolution, 2 in pool2
        self.block1 = nn.Sequential(_conv_block(2, w1, temporal_stride=2), _conv_block(w1, w1))
        self.block2 = nn.Sequential(_conv_block(w1, w2), _conv_block(w2, w2))
        self.block3 = nn.Sequential(_conv_block(w2, w3), _conv_block(w3, w3))
        self.head = _conv_block(w3, mid_channels)
        self.pool1 = nn.MaxPool3d((1, 2, 2))
        self.pool2 = nn.MaxPool3d((2, 2, 2))
        self.pool3 = nn.MaxPool3d((1, 2, 2))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.pool1(self.block1(x))
        e1 = self.pool2(self.block2(h))
        h = self.pool3(self.block3(e1))
        e2 = self.head(h)
        return e1, e2


class SpatioTemporalConv(nn.Module):
    """A 3-D convolution factorized into (1,3,3) spatial and (3,1,1) temporal parts."""

    def __init__(self, c_in: int, c_out: int, expansion: float = 1.7, temporal_stride: int = 1):
        super().__init__()
        planes = max(2, int(round(expansion * 27 * c_in * c_out / (9 * c_in + 3 * c_out))))
        self.spatial = nn.Conv3d(c_in, planes, kernel_size=(1, 3, 3), padding=(0, 1, 1))
        self.norm = _gn(planes)
        self.act = nn.ReLU(inplace=True)
        self.temporal = nn.Conv3d(
            planes, c_out, kernel_size=(3, 1, 1), padding=(1, 0, 0), stride=(temporal_stride, 1, 1)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.temporal(self.act(self.norm(self.spatial(x))))


def _factorized_block(c_in: int, c_out: int, temporal_stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        SpatioTemporalConv(c_in, c_out, temporal_stride=temporal_stride),
        _gn(c_out),
        nn.ReLU(inplace=True),
    )


class R2Plus1DEncoder(nn.Module):
    """Same block plan as the plain 3-D encoder with factorized convolutions."""

    def __init__(self, mid_channels: int):
        super().__init__()
        w1, w2, w3 = (_scaled(w, mid_channels) for w in (32, 64, 112))
        self.block1 = nn.Sequential(
            _factorized_block(2, w1, temporal_stride=2), _factorized_block(w1, w1)
        )
        self.block2 = nn.Sequential(_factorized_block(w1, w2), _factorized_block(w2, w2))
        self.block3 = nn.Sequential(_factorized_block(w2, w3), _factorized_block(w3, w3))
        self.head = _factorized_block(w3, mid_channels)
        self.pool1 = nn.MaxPool3d((1, 2, 2))
        self.pool2 = nn.MaxPool3d((2, 2, 2))
        self.pool3 = nn.MaxPool3d((1, 2, 2))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.pool1(self.block1(x))
        e1 = self.pool2(self.block2(h))
        h = self.pool3(self.block3(e1))
        e2 = self.head(h)
        return e1, e2


class _Mixed(nn.Module):
    """Inception-style mixed block: 1x1x1, 1x1x1 -> 3x3x3, and pooled 1x1x1 branches."""

    def __init__(self, c_in: int, b0: int, b1_mid: int, b1_out: int, b2: int):
        super().__init__()
        self.branch0 = nn.Sequential(nn.Conv3d(c_in, b0, 1), _gn(b0), nn.ReLU(inplace=True))
        self.branch1 = nn.Sequential(
            nn.Conv3d(c_in, b1_mid, 1),
            _gn(b1_mid),
            nn.ReLU(inplace=True),
            nn.Conv3d(b1_mid, b1_out, 3, padding=1),
            _gn(b1_out),
            nn.ReLU(inplace=True),
        )
        self.branch2 = nn.Sequential(
            nn.MaxPool3d(3, stride=1, padding=1),
            nn.Conv3d(c_in, b2, 1),
            _gn(b2),
            nn.ReLU(inplace=True),
        )
        self.out_channels = b0 + b1_out + b2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.branch0(x), self.branch1(x), self.branch2(x)], dim=1)


class I3DEncoder(nn.Module):
    """Single-stream inception-style encoder (pressure frames only, no flow)."""

    def __init__(self, mid_channels: int):
        super().__init__()
        s = lambda w: _scaled(w, mid_channels)  # noqa: E731
        self.stem = _conv_block(2, s(32), temporal_stride=2)
        self.mixed2 = _Mixed(s(32), s(32), s(48), s(96), s(16))
        self.mixed3 = _Mixed(self.mixed2.out_channels, s(64), s(128), s(256), s(32))
        self.head = nn.Sequential(
            nn.Conv3d(self.mixed3.out_channels, mid_channels, 1),
            _gn(mid_channels),
            nn.ReLU(inplace=True),
        )
        self.pool1 = nn.MaxPool3d((1, 2, 2))
        self.pool2 = nn.MaxPool3d((2, 2, 2))
        self.pool3 = nn.MaxPool3d((1, 2, 2))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.pool1(self.stem(x))
        e1 = self.pool2(self.mixed2(h))
        h = self.pool3(self.mixed3(e1))
        e2 = self.head(h)
        return e1, e2


class StudentEncoder(nn.Module):
    """Compact plain 3-D encoder; roughly a quarter of the smallest teacher."""

    def __init__(self, mid_channels: int):
        super().__init__()
        w1, w2, w3a, w3b = (_scaled(w, mid_channels) for w in (16, 32, 48, 64))
        self.block1 = _conv_block(2, w1, temporal_stride=2)
        self.block2 = _conv_block(w1, w2)
        self.block3 = nn.Sequential(_conv_block(w2, w3a), _conv_block(w3a, w3b))
        self.head = _conv_block(w3b, mid_channels)
        self.pool1 = nn.MaxPool3d((1, 2, 2))
        self.pool2 = nn.MaxPool3d((2, 2, 2))
        self.pool3 = nn.MaxPool3d((1, 2, 2))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.pool1(self.block1(x))
        e1 = self.pool2(self.block2(h))
        h = self.pool3(self.block3(e1))
        e2 = self.head(h)
        return e1, e2


class Decoder(nn.Module):
    """Shared 1-D decoder: two upsampling conv blocks then a sigmoid projection."""

    D1_CHANNELS = 32
    D2_CHANNELS = 16

    def __init__(self, mid_channels: int, out_channels: int = 2):
        super().__init__()
        self.conv1 = nn.Conv1d(mid_channels, self.D1_CHANNELS, kernel_size=5, padding=2)
        self.norm1 = _gn(self.D1_CHANNELS)
        self.conv2 = nn.Conv1d(self.D1_CHANNELS, self.D2_CHANNELS, kernel_size=5, padding=2)
        self.norm2 = _gn(self.D2_CHANNELS)
        self.out = nn.Conv1d(self.D2_CHANNELS, out_channels, kernel_size=5, padding=2)

    def forward(self, mid: torch.Tensor, t_out: int):
        h = F.interpolate(mid, scale_factor=2.0, mode="linear", align_corners=False)
        d1 = F.relu(self.norm1(self.conv1(h)))
        h = F.interpolate(d1, scale_factor=2.0, mode="linear", align_corners=False)
        d2 = F.relu(self.norm2(self.conv2(h)))
        if d2.shape[-1] != t_out:
            d2 = F.interpolate(d2, size=t_out, mode="linear", align_corners=True)
        y = torch.sigmoid(self.out(d2))
        return d1, d2, y


_ENCODERS = {
    ("c3d", "teacher"): C3DEncoder,
    ("i3d", "teacher"): I3DEncoder,
    ("r2plus1d", "teacher"): R2Plus1DEncoder,
}


class GrfNetwork(nn.Module):
    """Encoder-decoder regressor from insole clips to per-foot force series."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        if spec.scale == "student":
            # the compact model is plain-3-D-conv based for every teacher pairing
            self.encoder = StudentEncoder(spec.mid_channels)
        else:
            self.encoder = _ENCODERS[(spec.encoder_kind, "teacher")](spec.mid_channels)
        self.decoder = Decoder(spec.mid_channels, spec.out_channels)

    def _check_input(self, x: torch.Tensor) -> None:
        expect = (2, self.spec.window, GRID_ROWS, GRID_COLS)
        if x.dim() != 5 or tuple(x.shape[1:]) != expect:
            raise ValueError(f"expected input (batch, {', '.join(map(str, expect))}), got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor):
        self._check_input(x)
        e1, e2 = self.encoder(x)
        mid = spatial_average_pool(e2)
        return e1, e2, mid

    def decode(self, mid: torch.Tensor):
        return self.decoder(mid, self.spec.window)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_taps(x)[0]

    def forward_with_taps(self, x: torch.Tensor) -> tuple[torch.Tensor, TapBundle]:
        e1, e2, mid = self.encode(x)
        d1, d2, y = self.decode(mid)
        return y, TapBundle(E1=e1, E2=e2, Mid=mid, D1=d1, D2=d2, y_hat=y)


def build_network(spec: NetworkSpec, init_seed: int | None = None) -> GrfNetwork:
    """Construct a network; with ``init_seed`` the fan-in uniform init is reproducible."""
    if init_seed is None:
        return GrfNetwork(spec)
    with torch.random.fork_rng():
        torch.manual_seed(init_seed)
        return GrfNetwork(spec)


def parameter_count(network: nn.Module) -> int:
    """Exact count of trainable scalars."""
    return sum(p.numel() for p in network.parameters() if p.requires_grad)


def spatial_average_pool(feature: torch.Tensor) -> torch.Tensor:
    """Mean over the two spatial dims: (b, c, t, h, w) -> (b, c, t)."""
    if feature.dim() != 5:
        raise ValueError(f"expected a 5-D feature, got {feature.dim()}-D")
    return feature.mean(dim=(-2, -1))


def temporal_resize(feature: torch.Tensor, t_new: int) -> torch.Tensor:
    """Linearly interpolate (b, c, t) along time to t_new, preserving endpoints."""
    if t_new < 2:
        raise ValueError("t_new must be >= 2")
    if feature.dim() != 3:
        raise ValueError(f"expected a 3-D feature, got {feature.dim()}-D")
    if feature.shape[-1] == t_new:
        return feature
    return F.interpolate(feature, size=t_new, mode="linear", align_corners=True)


# --- checkpoint format: uint32 header length + JSON header + raw f32le blob ---
# Tensor bytes are concatenated in the order listed under header["tensors"].

_MAGIC = b"GRFN"


def _named_tensors(network: GrfNetwork, aux: dict[str, nn.Module] | None):
    for name, tensor in network.state_dict().items():
        yield f"net.{name}", tensor
    for mod_name, module in (aux or {}).items():
        for name, tensor in module.state_dict().items():
            yield f"aux.{mod_name}.{name}", tensor


def save_checkpoint(
    path: str | Path,
    network: GrfNetwork,
    seed: int,
    epoch: int,
    extra: dict | None = None,
    aux: dict[str, nn.Module] | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names, blobs = [], []
    for name, tensor in _named_tensors(network, aux):
        array = tensor.detach().cpu().to(torch.float32).numpy()
        names.append({"name": name, "shape": list(array.shape)})
        blobs.append(array.astype("<f4").tobytes())
    header = {
        "format_version": 1,
        "spec": asdict(network.spec),
        "seed": int(seed),
        "epoch": int(epoch),
        "extra": extra or {},
        "tensors": names,
    }
    payload = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: str | Path):
    """Rebuild the network from a checkpoint; returns (network, header, aux_tensors)."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path} is not a network checkpoint")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode())
    spec = NetworkSpec(**header["spec"])
    network = build_network(spec)
    offset = 8 + hlen
    state, aux_tensors = {}, {}
    import numpy as np

    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        numel = int(np.prod(shape)) if shape else 1
        chunk = np.frombuffer(raw, dtype="<f4", count=numel, offset=offset)
        offset += numel * 4
        tensor = torch.from_numpy(chunk.copy().reshape(shape))
        name = entry["name"]
        if name.startswith("net."):
            state[name[4:]] = tensor
        else:
            aux_tensors[name[4:]] = tensor
    reference = network.state_dict()
    network.load_state_dict({k: v.to(reference[k].dtype) for k, v in state.items()})
    return network, header, aux_tensors


def parameter_checksum(network: nn.Module) -> str:
    """SHA-256 over the concatenated parameter bytes, for frozen-model checks."""
    digest = hashlib.sha256()
    for _, tensor in sorted(network.state_dict().items()):
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
