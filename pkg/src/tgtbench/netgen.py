"""Network topologies, channel matrices and persisted datasets.

Storage convention: ``H[i, j]`` is the amplitude gain from transmitter ``j``
to receiver ``i``, so row ``i`` collects everything receiver ``i`` hears.
"""
from __future__ import annotations

import csv
import hashlib
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PATHLOSS_EXPONENT = 2.2
DEFAULT_SIGMA2 = 2.6e-5
MIN_DISTANCE = 1e-9

PLACEMENTS = ("radius", "area")


class DegenerateGeometryError(ValueError):
    """A transmitter and a receiver coincide, so the path gain is unbounded."""


class DatasetFormatError(IOError):
    pass


@dataclass(frozen=True)
class Topology:
    tx: np.ndarray
    rx: np.ndarray
    half_width: float

    @property
    def n(self) -> int:
        return self.tx.shape[0]

    def link_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.tx - self.rx, axis=1)

    def permute(self, perm: Sequence[int]) -> "Topology":
        perm = np.asarray(perm)
        return Topology(self.tx[perm], self.rx[perm], self.half_width)


@dataclass(frozen=True)
class ChannelInstance:
    H: np.ndarray
    sigma2: float = DEFAULT_SIGMA2
    weights: np.ndarray | None = None
    pmax: float = 1.0

    def __post_init__(self):
        H = np.asarray(self.H, dtype=np.float64)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ValueError(f"H must be square, got shape {H.shape}")
        if not np.all(np.isfinite(H)) or np.any(H < 0):
            raise ValueError("H entries must be finite and non-negative")
        if np.any(np.diag(H) <= 0):
            raise ValueError("direct-link gains (diagonal of H) must be positive")
        if not self.sigma2 > 0 or not self.pmax > 0:
            raise ValueError("sigma2 and pmax must be positive")
        w = np.ones(H.shape[0]) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (H.shape[0],) or np.any(w < 0):
            raise ValueError("weights must be a non-negative vector of length n")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "pmax", float(self.pmax))

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def permute(self, perm: Sequence[int]) -> "ChannelInstance":
        perm = np.asarray(perm)
        return ChannelInstance(self.H[np.ix_(perm, perm)], self.sigma2, self.weights[perm], self.pmax)

    def scaled(self, factor: float) -> "ChannelInstance":
        return ChannelInstance(self.H * factor, self.sigma2, self.weights, self.pmax)

    def with_sigma2(self, sigma2: float) -> "ChannelInstance":
        return ChannelInstance(self.H, sigma2, self.weights, self.pmax)


@dataclass(frozen=True)
class ChannelParams:
    """Simulation knobs. ``None`` picks the size-relative defaults (L = n, rx_max = n/4)."""

    sigma2: float = DEFAULT_SIGMA2
    pmax: float = 1.0
    fading_scale: float = 1.0
    half_width: float | None = None
    rx_min: float = 1.0
    rx_max: float | None = None
    placement: str = "radius"

    def resolve(self, n: int) -> tuple[float, float, float]:
        half_width = float(n) if self.half_width is None else float(self.half_width)
        rx_max = n / 4.0 if self.rx_max is None else float(self.rx_max)
        # tiny networks: keep the annulus valid
        return half_width, self.rx_min, max(rx_max, self.rx_min)


@dataclass
class Dataset:
    instances: list[ChannelInstance] = field(default_factory=list)
    topology_ids: list[int] = field(default_factory=list)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.instances)

    def __post_init__(self):
        if len(self.instances) != len(self.topology_ids):
            raise ValueError("instances and topology_ids must be parallel lists")

    def sizes(self) -> list[int]:
        return sorted({inst.n for inst in self.instances})

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.instances[i] for i in indices], [self.topology_ids[i] for i in indices], self.seed)

    def digest(self) -> str:
        return hashlib.sha256(encode_dataset(self)).hexdigest()


def sample_topology(
    n: int,
    half_width: float,
    rx_min: float,
    rx_max: float,
    rng: np.random.Generator,
    placement: str = "radius",
) -> Topology:
    """Uniform transmitters on [-L, L]^2, each receiver on an annulus around its transmitter.

    ``placement="radius"`` draws the link length uniformly on [rx_min, rx_max];
    ``"area"`` draws the receiver uniformly over the annulus area.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not (0 < rx_min <= rx_max):
        raise ValueError(f"need 0 < rx_min <= rx_max, got {rx_min}, {rx_max}")
    if half_width <= 0:
        raise ValueError("half_width must be positive")
    if placement not in PLACEMENTS:
        raise ValueError(f"placement must be one of {PLACEMENTS}")
    tx = rng.uniform(-half_width, half_width, size=(n, 2))
    u = rng.random(n)
    if placement == "radius":
        radius = rx_min + u * (rx_max - rx_min)
    else:
        radius = np.sqrt(u * (rx_max**2 - rx_min**2) + rx_min**2)
    # guard the float round-off at the annulus edges
    radius = np.clip(radius, rx_min, rx_max)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    rx = tx + radius[:, None] * np.column_stack([np.cos(angle), np.sin(angle)])
    return Topology(tx, rx, float(half_width))


def pathloss_matrix(topology: Topology, exponent: float = PATHLOSS_EXPONENT) -> np.ndarray:
    """Entry (i, j) = ||t_j - r_i||^(-exponent)."""
    dist = np.linalg.norm(topology.rx[:, None, :] - topology.tx[None, :, :], axis=-1)
    if np.any(dist < MIN_DISTANCE):
        i, j = np.argwhere(dist < MIN_DISTANCE)[0]
        raise DegenerateGeometryError(f"receiver {i} coincides with transmitter {j}")
    return dist ** (-exponent)


def sample_fading(n: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. Rayleigh(scale) amplitudes by inversion: scale * sqrt(-2 ln U), U in (0, 1]."""
    if not scale > 0:
        raise ValueError("fading scale must be positive")
    u = 1.0 - rng.random((n, n))
    return scale * np.sqrt(-2.0 * np.log(u))


def build_channel(
    topology: Topology,
    fading: np.ndarray,
    sigma2: float = DEFAULT_SIGMA2,
    weights: np.ndarray | None = None,
    pmax: float = 1.0,
    pathloss: np.ndarray | None = None,
) -> ChannelInstance:
    pl = pathloss_matrix(topology) if pathloss is None else pathloss
    fading = np.asarray(fading, dtype=np.float64)
    if fading.shape != pl.shape:
        raise ValueError(f"fading shape {fading.shape} does not match path-loss shape {pl.shape}")
    return ChannelInstance(pl * fading, sigma2, weights, pmax)


def _topology_block(n: int, fades: int, params: ChannelParams, seed_seq: np.random.SeedSequence) -> list[ChannelInstance]:
    rng = np.random.default_rng(seed_seq)
    half_width, rx_min, rx_max = params.resolve(n)
    topo = sample_topology(n, half_width, rx_min, rx_max, rng, params.placement)
    pl = pathloss_matrix(topo)
    return [
        build_channel(topo, sample_fading(n, params.fading_scale, rng), params.sigma2, None, params.pmax, pathloss=pl)
        for _ in range(fades)
    ]


def gen_dataset(
    n_list: Sequence[int],
    topologies: int,
    fades_per_topology: int,
    channel_params: ChannelParams | None = None,
    seed: int = 0,
    threads: int = 1,
) -> Dataset:
    """Sample ``topologies`` networks with ``fades_per_topology`` fading draws each.

    Network sizes cycle through ``n_list`` round-robin. Topology ``t`` draws
    from its own child stream of ``seed``, so output does not depend on
    ``threads``.
    """
    if topologies < 1 or fades_per_topology < 1:
        raise ValueError("topologies and fades_per_topology must be at least 1")
    if not n_list:
        raise ValueError("n_list must be non-empty")
    params = channel_params or ChannelParams()
    streams = np.random.SeedSequence(seed).spawn(topologies)
    sizes = [int(n_list[t % len(n_list)]) for t in range(topologies)]
    jobs = list(zip(sizes, streams))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(lambda job: _topology_block(job[0], fades_per_topology, params, job[1]), jobs))
    else:
        blocks = [_topology_block(n, fades_per_topology, params, ss) for n, ss in jobs]
    instances, ids = [], []
    for t, block in enumerate(blocks):
        instances.extend(block)
        ids.extend([t] * len(block))
    return Dataset(instances, ids, seed)


def fixed_topology_dataset(
    n: int, fades: int, channel_params: ChannelParams | None = None, seed: int = 0
) -> Dataset:
    """One topology, many fading draws."""
    return gen_dataset([n], 1, fades, channel_params, seed)


# -- persistence ---------------------------------------------------------

MAGIC = b"D2DPA1"
VERSION = 1
_HEADER = struct.Struct("<6sIQq")


def encode_dataset(dataset: Dataset) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(dataset), int(dataset.seed))]
    for inst, tid in zip(dataset.instances, dataset.topology_ids):
        parts.append(struct.pack("<I", inst.n))
        parts.append(np.ascontiguousarray(inst.H, dtype="<f8").tobytes())
        parts.append(struct.pack("<d", inst.sigma2))
        parts.append(np.ascontiguousarray(inst.weights, dtype="<f8").tobytes())
        parts.append(struct.pack("<dQ", inst.pmax, tid))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_dataset(blob: bytes) -> Dataset:
    if len(blob) < _HEADER.size + 4:
        raise DatasetFormatError("dataset file truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    magic, version, count, seed = _HEADER.unpack_from(body, 0)
    if magic != MAGIC:
        raise DatasetFormatError("not a dataset file")
    if zlib.crc32(body) != crc:
        raise DatasetFormatError("dataset checksum mismatch")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    pos = _HEADER.size
    instances, ids = [], []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        H = np.frombuffer(body, "<f8", n * n, pos).reshape(n, n).astype(np.float64)
        pos += 8 * n * n
        (sigma2,) = struct.unpack_from("<d", body, pos)
        pos += 8
        w = np.frombuffer(body, "<f8", n, pos).astype(np.float64)
        pos += 8 * n
        pmax, tid = struct.unpack_from("<dQ", body, pos)
        pos += 16
        instances.append(ChannelInstance(H, sigma2, w, pmax))
        ids.append(int(tid))
    if pos != len(body):
        raise DatasetFormatError("trailing bytes in dataset file")
    return Dataset(instances, ids, int(seed))


def save_dataset(dataset: Dataset, path) -> None:
    Path(path).write_bytes(encode_dataset(dataset))


def load_dataset(path) -> Dataset:
    return decode_dataset(Path(path).read_bytes())


def export_csv(dataset: Dataset, path) -> None:
    """One row per matrix entry, for eyeballing."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance", "topology", "rx", "tx", "h", "sigma2", "weight_rx", "pmax"])
        for k, (inst, tid) in enumerate(zip(dataset.instances, dataset.topology_ids)):
            for i in range(inst.n):
                for j in range(inst.n):
                    writer.writerow([k, tid, i, j, repr(inst.H[i, j]), repr(inst.sigma2), repr(inst.weights[i]), repr(inst.pmax)])


@dataclass(frozen=True)
class ChannelBatch:
    """Equal-size instances stacked along a leading axis."""

    H: np.ndarray  # (B, n, n)
    sigma2: np.ndarray  # (B,)
    weights: np.ndarray  # (B, n)
    pmax: np.ndarray  # (B,)

    @classmethod
    def stack(cls, instances: Sequence[ChannelInstance]) -> "ChannelBatch":
        sizes = {inst.n for inst in instances}
        if len(sizes) != 1:
            raise ValueError(f"cannot stack instances of sizes {sorted(sizes)}")
        return cls(
            np.stack([inst.H for inst in instances]),
            np.array([inst.sigma2 for inst in instances]),
            np.stack([inst.weights for inst in instances]),
            np.array([inst.pmax for inst in instances]),
        )

    def __len__(self) -> int:
        return self.H.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[-1]


def group_by_size(instances: Sequence[ChannelInstance]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for k, inst in enumerate(instances):
        groups.setdefault(inst.n, []).append(k)
    return groups
