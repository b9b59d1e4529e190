"""Bipartite attention: a small U-Net over the outer concatenation of two series.

The network maps a ``B x 2D x I x J`` tensor to ``B x I x J`` logits. Row-wise
softmax of the logits gives ``P_s`` (warps B onto A); row-wise softmax of the
transposed logits gives ``P_t`` (warps A onto B).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .data import as_array
from .nn import Conv2d, ConvBNReLU, Module


@dataclass(frozen=True)
class ArchConfig:
    """Architecture of the attention network.

    ``channels`` lists the widths per resolution level; the number of 2x2
    poolings is ``len(channels) - 1``.
    """

    in_dim: int = 1
    channels: tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    zero_head: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.in_dim < 1 or not self.channels or self.kernel_size % 2 == 0:
            raise ValueError(f"invalid architecture {self}")

    @property
    def n_pools(self) -> int:
        return len(self.channels) - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


class UNet(Module):
    def __init__(self, cfg: ArchConfig, rng: np.random.Generator):
        dt = np.dtype(cfg.dtype)
        k, mom, eps = cfg.kernel_size, cfg.bn_momentum, cfg.bn_eps
        ch = cfg.channels
        self.down = []
        cin = 2 * cfg.in_dim
        for c in ch:
            self.down.append(_DoubleConv(cin, c, k, rng, mom, eps, dt))
            cin = c
        self.up = []
        for lvl in range(len(ch) - 2, -1, -1):
            self.up.append(_DoubleConv(ch[lvl + 1] + ch[lvl], ch[lvl], k, rng, mom, eps, dt))
        self.head = Conv2d(ch[0], 1, (1, 1), rng, dt, zero=cfg.zero_head)

    def __call__(self, x: Node, training: bool) -> Node:
        skips = []
        h = x
        for i, block in enumerate(self.down):
            h = block(h, training)
            if i < len(self.down) - 1:
                skips.append(h)
                h = ad.maxpool2x2(h)
        for block in self.up:
            h = ad.upsample2x2(h)
            h = block(ad.concat_channels([h, skips.pop()]), training)
        return self.head(h)


class _DoubleConv(Module):
    def __init__(self, cin, cout, k, rng, mom, eps, dt):
        self.first = ConvBNReLU(cin, cout, k, rng, mom, eps, dt)
        self.second = ConvBNReLU(cout, cout, k, rng, mom, eps, dt)

    def __call__(self, x, training):
        return self.second(self.first(x, training), training)


class AttentionModel:
    """Architecture config plus the U-Net parameters."""

    def __init__(self, cfg: ArchConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.net = UNet(cfg, rng if rng is not None else np.random.default_rng(0))

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def parameters(self) -> list[Node]:
        return self.net.parameters()

    def named_parameters(self):
        return self.net.named_parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.net.state_dict()

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.net.load_state_dict(state)

    def logits(self, a_batch: np.ndarray, b_batch: np.ndarray, training: bool) -> Node:
        """Raw ``B x I x J`` network output for batches of equal-shape pairs."""
        a_batch = np.asarray(a_batch, dtype=self.dtype)
        b_batch = np.asarray(b_batch, dtype=self.dtype)
        if a_batch.shape[-1] != self.cfg.in_dim or b_batch.shape[-1] != self.cfg.in_dim:
            raise ValueError(f"model expects D={self.cfg.in_dim}, got series shapes "
                             f"{a_batch.shape[1:]} and {b_batch.shape[1:]}")
        x = ad.Node(outer_concat_batch(a_batch, b_batch))
        n, m = x.shape[-2:]
        mult = 2 ** self.cfg.n_pools
        x = ad.pad2d(x, -n % mult, -m % mult)
        out = self.net(x, training)
        out = ad.crop2d(out, n, m)
        return ad.reshape(out, (out.shape[0], n, m))

    def correspondences(self, a_batch, b_batch, training: bool) -> tuple[Node, Node, Node]:
        """(P_s, P_t, logits) nodes for a batch."""
        z = self.logits(a_batch, b_batch, training)
        return ad.row_softmax(z), ad.row_softmax(ad.transpose2d(z)), z


@dataclass
class CorrespondenceMatrices:
    p_s: np.ndarray
    p_t: np.ndarray
    logits: np.ndarray = field(repr=False)


def outer_concat(a, b) -> np.ndarray:
    """``2D x I x J`` tensor: channels [0, D) hold a_i, channels [D, 2D) hold b_j."""
    a, b = as_array(a), as_array(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return outer_concat_batch(a[None], b[None])[0]


def outer_concat_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    bsz, n, d = a.shape
    m = b.shape[1]
    if b.shape[0] != bsz or b.shape[2] != d:
        raise ValueError(f"batch shape mismatch: {a.shape} vs {b.shape}")
    out = np.empty((bsz, 2 * d, n, m), dtype=np.result_type(a, b))
    out[:, :d] = a.transpose(0, 2, 1)[:, :, :, None]
    out[:, d:] = b.transpose(0, 2, 1)[:, :, None, :]
    return out


def attend(model: AttentionModel, a, b, mode: str = "eval") -> CorrespondenceMatrices:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    a, b = as_array(a), as_array(b)
    with ad.no_grad():
        p_s, p_t, z = model.correspondences(a[None], b[None], training=mode == "train")
    return CorrespondenceMatrices(p_s.value[0].astype(np.float64),
                                  p_t.value[0].astype(np.float64),
                                  z.value[0].astype(np.float64))


def warp(p, x) -> np.ndarray:
    """Warp series ``x`` with a row-stochastic matrix: ``p @ x``."""
    p = np.asarray(p, dtype=np.float64)
    x = as_array(x)
    if p.ndim != 2 or p.shape[1] != x.shape[0]:
        raise ValueError(f"cannot warp series of length {x.shape[0]} with matrix {p.shape}")
    return p @ x


def distance_from_matrices(a, b, p_s: np.ndarray, p_t: np.ndarray) -> float:
    """Symmetric reconstruction distance given both correspondence matrices."""
    a, b = as_array(a), as_array(b)
    (n, d), m = a.shape, b.shape[0]
    err_s = np.sum((a - warp(p_s, b)) ** 2) / (n * d)
    err_t = np.sum((b - warp(p_t, a)) ** 2) / (m * d)
    return float(err_s + err_t)


def pair_distance(model: AttentionModel, a, b) -> float:
    """Eval-mode distance ``|A - P_s B|^2/(ID) + |B - P_t A|^2/(JD)``."""
    cm = attend(model, a, b, "eval")
    return distance_from_matrices(a, b, cm.p_s, cm.p_t)


def batch_distances(model: AttentionModel, a_batch: np.ndarray, b_batch: np.ndarray) -> np.ndarray:
    """Eval-mode distances for a batch of equal-shape pairs."""
    with ad.no_grad():
        p_s, p_t, _ = model.correspondences(a_batch, b_batch, training=False)
    a = np.asarray(a_batch, dtype=np.float64)
    b = np.asarray(b_batch, dtype=np.float64)
    n, d = a.shape[1:]
    m = b.shape[1]
    ws = p_s.value.astype(np.float64) @ b
    wt = p_t.value.astype(np.float64) @ a
    return (np.sum((a - ws) ** 2, axis=(1, 2)) / (n * d)
            + np.sum((b - wt) ** 2, axis=(1, 2)) / (m * d))


def distance_matrix(model: AttentionModel, queries: Sequence, references: Sequence,
                    chunk: int = 64, workers: int = 1) -> np.ndarray:
    """``d(q, r)`` for every query/reference pair (eval mode).

    Pairs of equal shape are evaluated in chunks; ``workers > 1`` spreads
    chunks over threads (the model is read-only in eval mode).
    """
    qs = [as_array(q) for q in queries]
    rs = [as_array(r) for r in references]
    pairs = [(i, j) for i in range(len(qs)) for j in range(len(rs))]
    groups: dict[tuple, list[tuple[int, int]]] = {}
    for i, j in pairs:
        groups.setdefault((qs[i].shape, rs[j].shape), []).append((i, j))
    jobs = []
    for members in groups.values():
        for s in range(0, len(members), chunk):
            jobs.append(members[s:s + chunk])

    def run(job):
        a = np.stack([qs[i] for i, _ in job])
        b = np.stack([rs[j] for _, j in job])
        return job, batch_distances(model, a, b)

    out = np.empty((len(qs), len(rs)))
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    for job, vals in results:
        for (i, j), v in zip(job, vals):
            out[i, j] = v
    return out


# --------------------------------------------------------------------------
# checkpoint container and matrix dumps
# --------------------------------------------------------------------------

MAGIC = b"DATWCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, config: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a checkpoint.

    Layout (all integers little-endian)::

        8 bytes   magic "DATWCKPT"
        uint32    format version
        uint32    length of the JSON header, then the UTF-8 JSON header
        uint32    number of arrays, then per array:
                  uint16 name length, UTF-8 name,
                  uint8 rank, rank x uint32 extents,
                  float64 little-endian payload in row-major order
    """
    import struct

    header = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        enc = name.encode()
        parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    _atomic_write(path, b"".join(parts))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    import struct

    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    config = json.loads(blob[pos:pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(blob, "<f8", size, pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return config, arrays


def _atomic_write(path, data: bytes) -> None:
    import os

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_model(model: AttentionModel, path, meta: dict | None = None,
               extra: dict[str, np.ndarray] | None = None) -> None:
    config = {"kind": "attention", "arch": model.cfg.to_dict(), "meta": meta or {}}
    arrays = dict(model.state_dict())
    arrays.update(extra or {})
    save_checkpoint(path, config, arrays)


def load_model(path) -> tuple[AttentionModel, dict, dict[str, np.ndarray]]:
    """Returns the model, the checkpoint meta block and any extra arrays."""
    config, arrays = load_checkpoint(path)
    if config.get("kind") != "attention":
        raise ValueError(f"{path}: checkpoint kind {config.get('kind')!r} is not 'attention'")
    model = AttentionModel(ArchConfig.from_dict(config["arch"]))
    names = set(model.state_dict())
    model.load_state_dict({k: v for k, v in arrays.items() if k in names})
    extra = {k: v for k, v in arrays.items() if k not in names}
    return model, config.get("meta", {}), extra


def dump_matrix_csv(path, matrix: np.ndarray, label: str) -> None:
    """Write ``# <label> rows cols`` followed by one CSV line per matrix row."""
    rows, cols = matrix.shape
    lines = [f"# {label} {rows} {cols}"]
    lines += [",".join(repr(float(v)) for v in row) for row in matrix]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_matrix_csv(path) -> tuple[str, np.ndarray]:
    with open(path) as fh:
        head = fh.readline().split()
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    label, rows, cols = head[1], int(head[2]), int(head[3])
    if data.shape != (rows, cols):
        raise ValueError(f"{path}: header says {rows}x{cols}, data is {data.shape}")
    return label, data
