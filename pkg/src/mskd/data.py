"""Synthetic multi-organ corpora, binary derivations, preprocessing, sampling.

Images are stored as raw CT-like intensities (HU scale) and only clipped and
normalised when batches are assembled, mirroring a real preprocessing chain.

On-disk layout of a dataset directory::

    manifest.txt          key=value lines (see ``Dataset.manifest_text``)
    img_0000.mskt ...     float32 image tensors
    lbl_0000.mskt ...     uint8 label tensors
"""

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, InvalidInputError, SamplingError

HU_WINDOW = (-325.0, 325.0)
MANIFEST_NAME = "manifest.txt"
MANIFEST_VERSION = 1

# ---- tensor files ------------------------------------------------------------------

TENSOR_MAGIC = b"MSKT"
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_CODE_FOR = {"f4": 1, "u1": 2, "i8": 3}


def write_tensor(path, array):
    """Header: magic, u8 dtype code, u32 rank, rank x u32 dims; then LE payload."""
    arr = np.asarray(array)
    code = _CODE_FOR.get(arr.dtype.str[1:])
    if code is None:
        raise DataError(f"unsupported tensor dtype {arr.dtype}")
    header = TENSOR_MAGIC + struct.pack("<BI", code, arr.ndim) + struct.pack(
        f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr.astype(_DTYPE_CODES[code], copy=False)).tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path):
    data = Path(path).read_bytes()
    if data[:4] != TENSOR_MAGIC:
        raise DataError(f"{path}: not an MSKT tensor file")
    try:
        code, rank = struct.unpack_from("<BI", data, 4)
        shape = struct.unpack_from(f"<{rank}I", data, 9)
        dtype = _DTYPE_CODES[code]
    except (struct.error, KeyError) as exc:
        raise DataError(f"{path}: malformed tensor header") from exc
    offset = 9 + 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(data) - offset != count * dtype.itemsize:
        raise DataError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(data, dtype=dtype, offset=offset).reshape(shape).copy()


# ---- dataset container -------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W float32, raw intensities
    labels: np.ndarray  # N x H x W uint8
    kind: str  # "multi-organ" or "binary-organ-<k>"
    num_organs: int
    seed: int = 0
    sources: list = None  # originating item id of each image
    annotated: list = None  # organs annotated in each item
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.images)
        if self.sources is None:
            self.sources = list(range(n))
        if self.annotated is None:
            organs = self.annotated_organs()
            self.annotated = [organs] * n

    def __len__(self):
        return len(self.images)

    @property
    def image_size(self):
        return int(self.images.shape[-1])

    @property
    def is_binary(self):
        return self.kind.startswith("binary-organ-")

    @property
    def organ(self):
        """Organ index of a binary dataset."""
        return int(self.kind.rsplit("-", 1)[1]) if self.is_binary else None

    def annotated_organs(self):
        if self.is_binary:
            return (self.organ,)
        return tuple(range(1, self.num_organs + 1))

    def foreground_flags(self):
        return self.labels.reshape(len(self), -1).max(axis=1) > 0

    def file_names(self, i):
        return f"img_{i:04d}.mskt", f"lbl_{i:04d}.mskt"

    def manifest_text(self):
        lines = [
            f"version={MANIFEST_VERSION}",
            f"kind={self.kind}",
            f"num_organs={self.num_organs}",
            f"count={len(self)}",
            f"image_size={self.image_size}",
            f"seed={self.seed}",
        ]
        lines += [f"note.{k}={v}" for k, v in sorted(self.notes.items())]
        for i in range(len(self)):
            img, lbl = self.file_names(i)
            organs = ",".join(str(k) for k in self.annotated[i])
            lines += [
                f"item.{i:04d}.image={img}",
                f"item.{i:04d}.label={lbl}",
                f"item.{i:04d}.source={self.sources[i]}",
                f"item.{i:04d}.annotated={organs}",
            ]
        return "\n".join(lines) + "\n"


def save_dataset(dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(len(dataset)):
        img, lbl = dataset.file_names(i)
        write_tensor(directory / img, dataset.images[i].astype(np.float32))
        write_tensor(directory / lbl, dataset.labels[i].astype(np.uint8))
    (directory / MANIFEST_NAME).write_text(dataset.manifest_text(), encoding="utf-8")


def read_manifest(directory):
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"no {MANIFEST_NAME} in {directory}")
    kv = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    return kv


def load_dataset(directory):
    directory = Path(directory)
    kv = read_manifest(directory)
    try:
        count = int(kv["count"])
        kind = kv["kind"]
        num_organs = int(kv["num_organs"])
        seed = int(kv.get("seed", 0))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{directory}: malformed manifest ({exc})") from exc
    images, labels, sources, annotated = [], [], [], []
    for i in range(count):
        key = f"item.{i:04d}"
        try:
            img_path = directory / kv[f"{key}.image"]
            lbl_path = directory / kv[f"{key}.label"]
        except KeyError as exc:
            raise DataError(f"{directory}: manifest lacks {exc}") from exc
        for p in (img_path, lbl_path):
            if not p.is_file():
                raise DataError(f"{directory}: referenced file {p.name} is missing")
        images.append(read_tensor(img_path))
        labels.append(read_tensor(lbl_path))
        sources.append(int(kv.get(f"{key}.source", i)))
        organs = kv.get(f"{key}.annotated", "")
        annotated.append(tuple(int(k) for k in organs.split(",") if k))
    notes = {k[5:]: v for k, v in kv.items() if k.startswith("note.")}
    ds = Dataset(
        images=np.stack(images).astype(np.float32) if images else np.zeros((0, 1, 1), np.float32),
        labels=np.stack(labels).astype(np.uint8) if labels else np.zeros((0, 1, 1), np.uint8),
        kind=kind, num_organs=num_organs, seed=seed, sources=sources, annotated=annotated,
        notes=notes,
    )
    if ds.is_binary and ds.labels.max(initial=0) > 1:
        raise DataError(f"{directory}: binary dataset holds labels > 1")
    return ds


# ---- synthetic generation ----------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    num_organs: int = 3
    image_size: int = 64
    num_train: int = 200
    num_test: int = 50
    # raw HU intensity band of each organ; None spreads K bands over 60..300
    organ_bands: tuple = None
    background_level: float = -40.0
    background_texture: float = 45.0
    noise_std: float = 40.0
    axis_range: tuple = (6.0, 12.0)
    organ_presence: float = 0.85
    seed: int = 0

    def __post_init__(self):
        if self.num_organs < 1:
            raise ConfigError("num_organs must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not 0 < self.axis_range[0] <= self.axis_range[1]:
            raise ConfigError(f"bad axis_range {self.axis_range}")
        if not 0 <= self.organ_presence <= 1:
            raise ConfigError("organ_presence must be in [0, 1]")
        bands = self.bands()
        if len(bands) != self.num_organs:
            raise ConfigError(f"need {self.num_organs} organ bands, got {len(bands)}")
        ordered = sorted(bands)
        for (lo, hi), (lo2, _) in zip(ordered, ordered[1:]):
            if hi > lo2:
                raise ConfigError("organ intensity bands must be disjoint")
        if any(lo >= hi for lo, hi in bands):
            raise ConfigError("every organ band needs lo < hi")
        half = min(r[2] for r in self.canonical_regions()) / 2.0
        if self.axis_range[1] + 1 > half:
            raise ConfigError(
                f"organ regions of {2 * half:.0f} px cannot hold ellipses with "
                f"semi-axis up to {self.axis_range[1]}"
            )

    def bands(self):
        if self.organ_bands is not None:
            return [tuple(map(float, b)) for b in self.organ_bands]
        edges = np.linspace(60.0, 300.0, 2 * self.num_organs + 1)
        # every other interval, leaving gaps between bands
        return [(float(edges[2 * i]), float(edges[2 * i + 1])) for i in range(self.num_organs)]

    def canonical_regions(self):
        """Disjoint square cells (row0, col0, size), one per organ."""
        cols = math.ceil(math.sqrt(self.num_organs))
        rows = math.ceil(self.num_organs / cols)
        size = self.image_size // max(rows, cols)
        return [((k // cols) * size, (k % cols) * size, size) for k in range(self.num_organs)]


def _ellipse(shape, center, axes, angle):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    c, s = math.cos(angle), math.sin(angle)
    u = (dx * c + dy * s) / axes[0]
    v = (-dx * s + dy * c) / axes[1]
    return u * u + v * v <= 1.0


def _synth_item(config, rng):
    n = config.image_size
    texture = ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma=3.0)
    texture /= texture.std() + 1e-12
    image = config.background_level + config.background_texture * texture
    label = np.zeros((n, n), dtype=np.uint8)
    lo_ax, hi_ax = config.axis_range
    for k, ((r0, c0, size), (b_lo, b_hi)) in enumerate(
            zip(config.canonical_regions(), config.bands()), start=1):
        # draws happen unconditionally so presence does not shift later streams
        present = rng.random() < config.organ_presence
        axes = rng.uniform(lo_ax, hi_ax, size=2)
        angle = rng.uniform(0, math.pi)
        slack = size / 2.0 - hi_ax - 1
        center = (r0 + size / 2.0 + rng.uniform(-slack, slack),
                  c0 + size / 2.0 + rng.uniform(-slack, slack))
        level = rng.uniform(b_lo, b_hi)
        if not present:
            continue
        inside = _ellipse((n, n), center, axes, angle)
        image[inside] = level
        label[inside] = k
    if config.noise_std > 0:
        image = image + rng.normal(0.0, config.noise_std, size=(n, n))
    return image.astype(np.float32), label


def generate_synthetic_dataset(config, split="train"):
    """Deterministic multi-organ dataset; ``split`` selects an independent stream."""
    count = {"train": config.num_train, "test": config.num_test}[split]
    split_id = {"train": 0, "test": 1}[split]
    images, labels = [], []
    for i in range(count):
        rng = np.random.default_rng([config.seed, split_id, i])
        img, lbl = _synth_item(config, rng)
        images.append(img)
        labels.append(lbl)
    n = config.image_size
    return Dataset(
        images=np.stack(images) if images else np.zeros((0, n, n), np.float32),
        labels=np.stack(labels) if labels else np.zeros((0, n, n), np.uint8),
        kind="multi-organ",
        num_organs=config.num_organs,
        seed=config.seed,
        notes={"split": split},
    )


def derive_binary_dataset(multi, k, disjoint=False):
    """Keep only organ ``k``'s annotation.

    With ``disjoint`` the items are split into K interleaved subsets and the
    k-th subset is returned, modelling separately collected corpora.
    """
    if not 1 <= k <= multi.num_organs:
        raise InvalidInputError(f"organ {k} outside 1..{multi.num_organs}")
    idx = np.arange(len(multi))
    if disjoint:
        idx = idx[idx % multi.num_organs == k - 1]
    return Dataset(
        images=multi.images[idx].copy(),
        labels=(multi.labels[idx] == k).astype(np.uint8),
        kind=f"binary-organ-{k}",
        num_organs=multi.num_organs,
        seed=multi.seed,
        sources=[multi.sources[i] for i in idx],
        annotated=[(k,)] * len(idx),
        notes={**multi.notes, "derived_from": multi.kind, "disjoint": str(disjoint).lower()},
    )


def clip_normalize_intensity(image, lo=HU_WINDOW[0], hi=HU_WINDOW[1]):
    if not lo < hi:
        raise ConfigError(f"intensity window needs lo < hi, got [{lo}, {hi}]")
    x = np.clip(np.asarray(image, dtype=np.float64), lo, hi)
    return (2.0 * (x - lo) / (hi - lo) - 1.0).astype(np.float32)


def sample_batch(dataset, batch_size, fg_fraction, rng):
    """Indices for one batch.

    ``dataset`` is a :class:`Dataset` or a boolean array flagging items that
    contain foreground. At least ``ceil(fg_fraction * batch_size)`` of the
    returned items are flagged; the rest are uniform draws.
    """
    if not 0 <= fg_fraction <= 1:
        raise InvalidInputError(f"fg_fraction must be in [0, 1], got {fg_fraction}")
    if isinstance(dataset, Dataset):
        dataset = dataset.foreground_flags()
    flags = np.asarray(dataset, dtype=bool)
    if len(flags) == 0:
        raise SamplingError("cannot sample from an empty dataset")
    # round first so 0.33 * 3 = 0.99 is not pushed to 1 by float noise
    n_fg = math.ceil(round(fg_fraction * batch_size, 9))
    fg_items = np.flatnonzero(flags)
    if n_fg > 0 and len(fg_items) == 0:
        raise SamplingError("fg_fraction > 0 but no item contains foreground")
    chosen = list(rng.choice(fg_items, size=n_fg)) if n_fg else []
    chosen += list(rng.integers(0, len(flags), size=batch_size - n_fg))
    return np.asarray(chosen, dtype=np.int64)
