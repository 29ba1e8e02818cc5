"""2D U-Net segmentation network with a decoder feature tap.

Teachers and students share one architecture; only the width of the final
1x1 projection (``head``) differs.
"""

import io
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ConfigMismatchError, CorruptCheckpointError, ShapeError

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    out_channels: int = 2
    depth: int = 3
    base_width: int = 16
    feature_tap_level: int = 1

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.out_channels < 2:
            raise ConfigError(f"out_channels must be >= 2, got {self.out_channels}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ConfigError(f"base_width must be >= 1, got {self.base_width}")
        if not 0 <= self.feature_tap_level < self.depth:
            raise ConfigError(
                f"feature_tap_level must be in 0..{self.depth - 1}, got {self.feature_tap_level}"
            )

    def with_outputs(self, out_channels):
        return ModelConfig(**{**asdict(self), "out_channels": out_channels})

    def tap_channels(self, level=None):
        level = self.feature_tap_level if level is None else level
        return self.base_width * 2 ** level

    def compatible_with(self, other):
        """Same trunk (everything but the output width and default tap)."""
        return (self.in_channels, self.depth, self.base_width) == (
            other.in_channels, other.depth, other.base_width)


@dataclass
class ForwardResult:
    logits: torch.Tensor
    features: dict


class ConvBlock(nn.Module):
    """conv-norm-relu-conv-norm; the caller applies the last activation."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(cout, affine=True)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(cout, affine=True)

    def forward(self, x):
        x = F.relu(self.norm1(self.conv1(x)))
        return self.norm2(self.conv2(x))


class SegModel(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        w = config.base_width
        widths = [w * 2 ** i for i in range(config.depth + 1)]
        self.encoders = nn.ModuleList()
        cin = config.in_channels
        for i in range(config.depth):
            self.encoders.append(ConvBlock(cin, widths[i]))
            cin = widths[i]
        self.bottleneck = ConvBlock(widths[-2], widths[-1])
        self.up_convs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in reversed(range(config.depth)):
            self.up_convs.append(nn.Conv2d(widths[i + 1], widths[i], 3, padding=1))
            self.decoders.append(ConvBlock(2 * widths[i], widths[i]))
        self.head = nn.Conv2d(widths[0], config.out_channels, 1)

    def forward(self, x):
        """Return ``(logits, taps)``; ``taps[l]`` is the pre-activation decoder
        block output at resolution ``H/2^l``."""
        cfg = self.config
        factor = 2 ** cfg.depth
        if x.dim() != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected B x {cfg.in_channels} x H x W, got {tuple(x.shape)}")
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ShapeError(
                f"input size {x.shape[-2]}x{x.shape[-1]} not divisible by 2^{cfg.depth}"
            )
        skips = []
        for enc in self.encoders:
            x = F.relu(enc(x))
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = F.relu(self.bottleneck(x))
        taps = {}
        for up, dec, level in zip(self.up_convs, self.decoders, reversed(range(cfg.depth))):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = dec(torch.cat([x, skips[level]], dim=1))
            taps[level] = x
            x = F.relu(x)
        return self.head(x), taps

    def run(self, batch, level=None):
        level = self.config.feature_tap_level if level is None else level
        logits, taps = self(batch)
        return ForwardResult(logits=logits, features={level: taps[level]})


def build_model(config, seed):
    """Deterministic initialisation: same (config, seed) gives identical weights."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        model = SegModel(config)
    return model


def forward(model, batch, level=None):
    return model.run(torch.as_tensor(batch, dtype=torch.float32), level)


def make_optimizer(model, lr):
    return torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def gradients(model, loss):
    """Named gradients of ``loss``; parameters the loss ignores get zeros."""
    names, params = zip(*model.named_parameters())
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in zip(names, params)}
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {
        n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)
    }


def apply_update(model, optimizer, grads):
    for name, p in model.named_parameters():
        g = grads[name]
        if g.shape != p.shape:
            raise RuntimeError(f"gradient for {name} has shape {tuple(g.shape)}, "
                               f"parameter has {tuple(p.shape)}")
        p.grad = g.detach().clone()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return model


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


# ---- checkpoint format -------------------------------------------------------------
#
# "MSKD" | u32 version | u32 len + config text | u32 len + meta text | u32 count |
# count x (u32 name len, name, u8 dtype code, u32 rank, rank x u32 dims, f32 LE payload)

MAGIC = b"MSKD"
FORMAT_VERSION = 1
DTYPE_F32 = 1


def _kv_text(mapping):
    return "".join(f"{k}={v}\n" for k, v in mapping.items()).encode("utf-8")


def _parse_kv(text):
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value
    return out


def _model_config_from_kv(kv):
    try:
        return ModelConfig(**{f.name: int(kv[f.name]) for f in fields(ModelConfig)})
    except (KeyError, ValueError) as exc:
        raise CorruptCheckpointError(f"bad model config block: {exc}") from exc


def _optimizer_tensors(model, optimizer):
    tensors, step = {}, 0
    if optimizer is None:
        return tensors, step
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        step = int(state["step"])
        tensors[f"optim.exp_avg.{name}"] = state["exp_avg"]
        tensors[f"optim.exp_avg_sq.{name}"] = state["exp_avg_sq"]
    return tensors, step


def save_checkpoint(model, optimizer, path, meta=None):
    """Write model weights, Adam moments and free-form metadata."""
    meta = dict(meta or {})
    opt_tensors, step = _optimizer_tensors(model, optimizer)
    meta["optim.step"] = step
    if optimizer is not None:
        meta["optim.lr"] = repr(float(optimizer.param_groups[0]["lr"]))
    tensors = {f"param.{n}": p.detach() for n, p in model.named_parameters()}
    tensors.update(opt_tensors)

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    for block in (_kv_text(asdict(model.config)), _kv_text(meta)):
        buf.write(struct.pack("<I", len(block)))
        buf.write(block)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", DTYPE_F32, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path):
    """Parse a checkpoint into ``(ModelConfig, meta dict, {name: ndarray})``."""
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CorruptCheckpointError("bad magic, not an MSKD checkpoint", 0)
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CorruptCheckpointError(f"unsupported format version {version}", 4)
    blocks = []
    for what in ("config", "meta"):
        (n,) = r.unpack("<I", f"{what} length")
        try:
            blocks.append(_parse_kv(r.take(n, what).decode("utf-8")))
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"{what} block is not UTF-8", r.pos) from exc
    config = _model_config_from_kv(blocks[0])
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        start = r.pos
        (n,) = r.unpack("<I", "tensor name length")
        name = r.take(n, "tensor name").decode("utf-8", errors="replace")
        code, rank = r.unpack("<BI", f"header of {name}")
        if code != DTYPE_F32:
            raise CorruptCheckpointError(f"unknown dtype code {code} for {name}", start)
        shape = r.unpack(f"<{rank}I", f"shape of {name}")
        size = int(np.prod(shape, dtype=np.int64)) * 4
        payload = r.take(size, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if r.pos != len(data):
        raise CorruptCheckpointError("trailing bytes after last tensor", r.pos)
    return config, blocks[1], tensors


def load_checkpoint(path, expected_out_channels=None):
    """Rebuild ``(model, optimizer, meta)`` from a checkpoint file."""
    config, meta, tensors = read_checkpoint(path)
    if expected_out_channels is not None and config.out_channels != expected_out_channels:
        raise ConfigMismatchError(
            f"checkpoint {path} has {config.out_channels} output classes, "
            f"expected {expected_out_channels}"
        )
    model = SegModel(config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"param.{name}"
            if key not in tensors:
                raise CorruptCheckpointError(f"missing parameter {name}")
            value = torch.from_numpy(tensors[key])
            if value.shape != p.shape:
                raise CorruptCheckpointError(
                    f"parameter {name} has shape {tuple(value.shape)}, expected {tuple(p.shape)}"
                )
            p.copy_(value)
    lr = float(meta.get("optim.lr", "0.0003"))
    optimizer = make_optimizer(model, lr)
    step = int(meta.get("optim.step", "0"))
    if step > 0:
        for name, p in model.named_parameters():
            optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": torch.from_numpy(tensors[f"optim.exp_avg.{name}"]),
                "exp_avg_sq": torch.from_numpy(tensors[f"optim.exp_avg_sq.{name}"]),
            }
    return model, optimizer, meta
