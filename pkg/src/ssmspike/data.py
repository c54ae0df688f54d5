"""Event datasets: SHD container I/O, binning, manifests and synthetic data.

Container layout (all little-endian)::

    header   magic b"SSPK" | u16 version | u16 num_channels | u16 num_classes
             | u16 reserved | u32 num_samples
    sample   u32 index | u16 label | u16 reserved | u32 num_events
             | f64 duration (NaN: use last event time)
             | f64[num_events] times | u16[num_events] units | u32 crc32
    trailer  32-byte SHA-256 of everything before it

The per-sample CRC covers the sample bytes preceding it. Sample IDs used in
manifests are ``"<split>-<index>"`` with the index zero-padded to 5 digits.
"""

import hashlib
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, IntegrityError

MAGIC = b"SSPK"
CONTAINER_VERSION = 1
SHD_CHANNELS = 700
SHD_CLASSES = 20
SHD_BINS = 100
SHD_SIZES = {"train": 8156, "test": 2264}
SPLITS = ("train", "test")

_HEADER = struct.Struct("<4sHHHHI")
_SAMPLE = struct.Struct("<IHHId")


@dataclass
class EventRecord:
    times: np.ndarray
    units: np.ndarray
    label: int
    index: int = 0
    split: str = "train"
    duration: float = float("nan")

    @property
    def sample_id(self):
        return sample_id(self.split, self.index)

    def validate(self, num_channels=SHD_CHANNELS, num_classes=SHD_CLASSES):
        if len(self.times) != len(self.units):
            raise DataError(f"{self.sample_id}: {len(self.times)} times but {len(self.units)} units")
        if len(self.units) and (self.units.min() < 0 or self.units.max() >= num_channels):
            raise DataError(f"{self.sample_id}: unit index outside [0, {num_channels})")
        if not 0 <= self.label < num_classes:
            raise DataError(f"{self.sample_id}: label {self.label} outside [0, {num_classes})")
        if len(self.times) and (self.times.min() < 0 or not np.isfinite(self.times).all()):
            raise DataError(f"{self.sample_id}: event times must be finite and non-negative")


@dataclass
class SpikeBatch:
    counts: np.ndarray
    labels: np.ndarray
    ids: tuple = ()

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx)
        ids = tuple(self.ids[i] for i in idx) if self.ids else ()
        return SpikeBatch(self.counts[idx], self.labels[idx], ids)


def sample_id(split, index):
    return f"{split}-{index:05d}"


def parse_sample_id(text):
    split, _, index = text.strip().rpartition("-")
    if split not in SPLITS or not index.isdigit():
        raise DataError(f"malformed sample id {text!r}")
    return split, int(index)


# -- binning -------------------------------------------------------------------


def bin_events(rec, num_bins=SHD_BINS, num_channels=SHD_CHANNELS):
    """Dense ``num_bins x num_channels`` spike counts over equal time windows.

    The window length is the sample duration (its last event time unless the
    record carries one) divided by ``num_bins``.
    """
    grid = np.zeros((num_bins, num_channels), dtype=np.int32)
    if len(rec.times) == 0:
        return grid
    times = np.asarray(rec.times, dtype=np.float64)
    duration = rec.duration if np.isfinite(rec.duration) else float(times.max())
    if duration > 0:
        k = np.floor(times * (num_bins / duration)).astype(np.int64)
        k = np.clip(k, 0, num_bins - 1)
    else:
        k = np.zeros(len(times), dtype=np.int64)
    np.add.at(grid, (k, np.asarray(rec.units, dtype=np.int64)), 1)
    return grid


def bin_records(records, num_bins=SHD_BINS, num_channels=SHD_CHANNELS):
    counts = np.stack([bin_events(r, num_bins, num_channels) for r in records]) if records else \
        np.zeros((0, num_bins, num_channels), dtype=np.int32)
    labels = np.array([r.label for r in records], dtype=np.int64)
    return SpikeBatch(counts, labels, tuple(r.sample_id for r in records))


# -- container -----------------------------------------------------------------


def write_container(path, records, num_channels=SHD_CHANNELS, num_classes=SHD_CLASSES):
    digest = hashlib.sha256()
    with open(path, "wb") as fh:
        def put(chunk):
            digest.update(chunk)
            fh.write(chunk)

        put(_HEADER.pack(MAGIC, CONTAINER_VERSION, num_channels, num_classes, 0, len(records)))
        for rec in records:
            rec.validate(num_channels, num_classes)
            times = np.ascontiguousarray(rec.times, dtype="<f8")
            units = np.ascontiguousarray(rec.units, dtype="<u2")
            body = _SAMPLE.pack(rec.index, rec.label, 0, len(times), rec.duration) + times.tobytes() + units.tobytes()
            put(body + struct.pack("<I", zlib.crc32(body)))
        fh.write(digest.digest())


def read_container(path, split="train"):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IOError(f"cannot read dataset container {path}: {exc}") from exc
    if len(raw) < _HEADER.size + 32:
        raise IntegrityError(f"{path}: truncated container")
    payload, trailer = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != trailer:
        raise IntegrityError(f"{path}: checksum mismatch")
    magic, version, channels, classes, _, count = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise IntegrityError(f"{path}: bad magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise IntegrityError(f"{path}: unsupported container version {version}")
    pos = _HEADER.size
    records = []
    for _ in range(count):
        start = pos
        index, label, _, n, duration = _SAMPLE.unpack_from(payload, pos)
        pos += _SAMPLE.size
        times = np.frombuffer(payload, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
        units = np.frombuffer(payload, dtype="<u2", count=n, offset=pos).astype(np.int64)
        pos += 2 * n
        (crc,) = struct.unpack_from("<I", payload, pos)
        if zlib.crc32(payload[start:pos]) != crc:
            raise IntegrityError(f"{path}: sample {index} failed its CRC")
        pos += 4
        records.append(EventRecord(times, units, int(label), int(index), split, duration))
    if pos != len(payload):
        raise IntegrityError(f"{path}: {len(payload) - pos} trailing bytes")
    return records, {"num_channels": channels, "num_classes": classes}


def container_path(root, split):
    return Path(root) / f"shd_{split}.sspk"


def read_manifest(path):
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip() and not line.startswith("#")]


def write_manifest(path, ids):
    with open(path, "w") as fh:
        for i in ids:
            fh.write(f"{i}\n")


def load_dataset(path, split, manifest=None):
    """Records of one split from a container directory.

    ``manifest`` is a path or a list of sample IDs; the result follows its
    order.
    """
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    records, _ = read_container(container_path(path, split), split)
    if manifest is None:
        return records
    ids = read_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    by_index = {r.index: r for r in records}
    out = []
    for text in ids:
        s, index = parse_sample_id(text)
        if s != split:
            raise DataError(f"manifest entry {text!r} does not belong to split {split!r}")
        if index not in by_index:
            raise DataError(f"manifest entry {text!r} not found in {container_path(path, split)}")
        out.append(by_index[index])
    return out


def stratified_manifest(records, count, seed=0):
    """``count`` sample IDs drawn evenly across classes, sorted for stability."""
    rng = np.random.default_rng(seed)
    labels = np.array([r.label for r in records])
    classes = np.unique(labels)
    per = np.full(len(classes), count // len(classes))
    per[: count % len(classes)] += 1
    chosen = []
    for c, k in zip(classes, per):
        pool = np.flatnonzero(labels == c)
        if k > len(pool):
            raise DataError(f"class {c} has only {len(pool)} samples, {k} requested")
        chosen.extend(pool[rng.choice(len(pool), k, replace=False)])
    return [records[i].sample_id for i in sorted(chosen)]


def convert_shd_h5(h5_path, out_path, split):
    """Convert a published SHD HDF5 file (``spikes/times``, ``spikes/units``,
    ``labels``) to the portable container."""
    import h5py

    with h5py.File(h5_path, "r") as f:
        times = f["spikes"]["times"]
        units = f["spikes"]["units"]
        labels = np.asarray(f["labels"])
        records = [
            EventRecord(np.asarray(times[i], dtype=np.float64), np.asarray(units[i], dtype=np.int64),
                        int(labels[i]), i, split)
            for i in range(len(labels))
        ]
    write_container(out_path, records)
    return len(records)


# -- synthetic data --------------------------------------------------------------


def synthetic_dataset(classes=2, channels=40, T=20, n_train=200, n_test=100,
                      contrast=4.0, base_rate=0.1, active_fraction=0.25, seed=0):
    """Poisson spike counts with a class-specific set of elevated channels.

    Channel ``c`` of class ``k`` fires at ``base_rate * (1 + contrast)`` per
    bin when it belongs to the class's active set and ``base_rate``
    otherwise; ``contrast=0`` makes all classes identical.
    """
    rng = np.random.default_rng(seed)
    k_active = max(1, int(round(active_fraction * channels)))
    rates = np.full((classes, channels), float(base_rate))
    for c in range(classes):
        rates[c, rng.choice(channels, k_active, replace=False)] *= 1.0 + contrast

    def draw(count, split):
        labels = np.arange(count) % classes
        rng.shuffle(labels)
        lam = np.broadcast_to(rates[labels][:, None, :], (count, T, channels))
        counts = rng.poisson(lam).astype(np.int32)
        return SpikeBatch(counts, labels.astype(np.int64), tuple(sample_id(split, i) for i in range(count)))

    return draw(n_train, "train"), draw(n_test, "test")
