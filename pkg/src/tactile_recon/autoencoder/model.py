"""Point-cloud autoencoder: shared per-point encoder, self-attention, upsampling decoder."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ModelError, ModelFormatError
from ..geometry import PointCloud
from ..metrics import nearest_neighbors
from ..rng import make_rng
from . import tensor as T
from .tensor import Tensor

MODEL_MAGIC = b"ACTR"
MODEL_VERSION = 1
BN_EPS = 1e-5


@dataclass(frozen=True)
class Architecture:
    enc_widths: Tuple[int, ...] = (64, 64, 128, 1024)
    qk_dim: int = 128
    fc_length: int = 64
    fc_channels: int = 16
    deconv_channels: Tuple[int, ...] = (256, 128, 64, 32, 3)
    kernel: int = 4

    def __post_init__(self):
        if not self.enc_widths or min(self.enc_widths) < 1:
            raise ModelError("encoder widths must be positive")
        if not self.deconv_channels or self.deconv_channels[-1] != 3:
            raise ModelError("the last deconvolution must output 3 channels")
        if min(self.qk_dim, self.fc_length, self.fc_channels) < 1:
            raise ModelError("attention and decoder sizes must be positive")

    @property
    def width(self) -> int:
        return self.enc_widths[-1]

    @property
    def n_out(self) -> int:
        return self.fc_length * 2 ** len(self.deconv_channels)


PRESETS: Dict[str, Architecture] = {
    "paper": Architecture(),
    "desk": Architecture((16, 16, 32, 128), 16, 16, 8, (64, 32, 32, 16, 3)),
}


@dataclass
class ModelParams:
    arch: Architecture
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.params.items()},
                           {k: v.copy() for k, v in self.buffers.items()})

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def _bn_names(prefix: str):
    return f"{prefix}.bn.gamma", f"{prefix}.bn.beta", f"{prefix}.bn.running_mean", f"{prefix}.bn.running_var"


def init_params(arch: Architecture, seed: int = 0) -> ModelParams:
    """Uniform fan-in initialisation; normalisation layers start as identity."""
    rng = make_rng(seed, "init_params")
    p: Dict[str, np.ndarray] = {}
    buf: Dict[str, np.ndarray] = {}

    def lin(name, fan_in, shape, bias=None):
        bound = 1.0 / np.sqrt(fan_in)
        p[f"{name}.W"] = rng.uniform(-bound, bound, shape)
        if bias is not None:
            p[f"{name}.b"] = rng.uniform(-bound, bound, bias)

    def bn(name, c):
        g, b, m, v = _bn_names(name)
        p[g] = np.ones(c)
        p[b] = np.zeros(c)
        buf[m] = np.zeros(c)
        buf[v] = np.ones(c)

    c_in = 3
    for i, c in enumerate(arch.enc_widths):
        lin(f"enc.{i}", c_in, (c_in, c))
        bn(f"enc.{i}", c)
        c_in = c
    C = arch.width
    lin("sa.G", C, (C, arch.qk_dim), arch.qk_dim)
    # a bias on H only shifts each softmax row by a constant, so it is omitted
    lin("sa.H", C, (C, arch.qk_dim))
    lin("sa.K", C, (C, C), C)
    lin("agg", 2 * C, (2 * C, C))
    lin("dec.fc", C, (C, arch.fc_length * arch.fc_channels))
    bn("dec.fc", arch.fc_length * arch.fc_channels)
    c_in = arch.fc_channels
    last = len(arch.deconv_channels) - 1
    for k, c in enumerate(arch.deconv_channels):
        lin(f"dec.deconv.{k}", c_in * arch.kernel, (c_in, c, arch.kernel), c if k == last else None)
        if k != last:
            bn(f"dec.deconv.{k}", c)
        c_in = c
    return ModelParams(arch, p, buf)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


class _Graph:
    """Parameter tensors for one forward evaluation plus collected BN batch statistics."""

    def __init__(self, mp: ModelParams, train: bool):
        self.mp = mp
        self.train = train
        self.t = {k: T.param(v) for k, v in mp.params.items()}
        self.stats: List[Tuple[str, np.ndarray, np.ndarray, int]] = []

    def bn(self, x: Tensor, name: str, axes, channel_axis) -> Tensor:
        g, b, m, v = _bn_names(name)
        collected: list = []
        out = T.batchnorm(x, self.t[g], self.t[b], axes, channel_axis, self.train,
                          self.mp.buffers[m], self.mp.buffers[v], BN_EPS, collected)
        for mu, var, count in collected:
            self.stats.append((name, mu, var, count))
        return out

    def linear(self, x: Tensor, name: str) -> Tensor:
        out = T.matmul(x, self.t[f"{name}.W"])
        if f"{name}.b" in self.t:
            out = T.add_bias(out, self.t[f"{name}.b"])
        return out


def self_attention(features: Tensor, g: _Graph) -> Tensor:
    """Residual dot-product attention across the points of one cloud.

    ``W = softmax(G H^T)`` row-wise (each point's weights over all points sum
    to 1) and the output is ``features + W K``.
    """
    if features.data.ndim != 2 or features.shape[1] != g.mp.arch.width:
        raise ModelError(f"attention expects (n, {g.mp.arch.width}) features, got {features.shape}")
    G = g.linear(features, "sa.G")
    H = g.linear(features, "sa.H")
    K = g.linear(features, "sa.K")
    W = T.softmax_rows(T.matmul(G, T.transpose(H)))
    return T.add(features, T.matmul(W, K))


def attention_weights(mp: ModelParams, features: np.ndarray) -> np.ndarray:
    g = _Graph(mp, train=False)
    f = T.constant(features)
    G = g.linear(f, "sa.G")
    H = g.linear(f, "sa.H")
    return T.softmax_rows(T.matmul(G, T.transpose(H))).data


def _stack_inputs(clouds: Sequence[np.ndarray]):
    arrs = []
    for i, c in enumerate(clouds):
        a = c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64).reshape(-1, 3)
        if len(a) == 0:
            raise ModelError(f"input cloud {i} is empty")
        arrs.append(a)
    offsets = np.cumsum([0] + [len(a) for a in arrs]).tolist()
    return np.concatenate(arrs), offsets


def encode(g: _Graph, clouds) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns ``(global_feature, max_pooled, attention_pooled)``, each ``(B, C)``."""
    X, offsets = _stack_inputs(clouds)
    x = T.constant(X)
    for i in range(len(g.mp.arch.enc_widths)):
        x = T.relu(g.bn(g.linear(x, f"enc.{i}"), f"enc.{i}", (0,), 1))
    pooled = T.segment_max(x, offsets)
    att = [self_attention(T.rows(x, s, e), g) for s, e in zip(offsets[:-1], offsets[1:])]
    att_pooled = T.segment_max(T.concat(att, 0), offsets)
    glob = g.linear(T.concat([pooled, att_pooled], axis=1), "agg")
    return glob, pooled, att_pooled


def decode(g: _Graph, glob: Tensor) -> Tensor:
    arch = g.mp.arch
    B = glob.shape[0]
    h = T.relu(g.bn(g.linear(glob, "dec.fc"), "dec.fc", (0,), 1))
    h = T.reshape(h, (B, arch.fc_channels, arch.fc_length))
    last = len(arch.deconv_channels) - 1
    for k in range(len(arch.deconv_channels)):
        h = T.conv_transpose1d(h, g.t[f"dec.deconv.{k}.W"], stride=2, padding=1)
        if k == last:
            h = T.add_bias(h, g.t[f"dec.deconv.{k}.b"], axis=1)
        else:
            h = T.relu(g.bn(h, f"dec.deconv.{k}", (0, 2), 1))
    # output points in (0, 1): the training targets live in the unit cube
    return T.sigmoid(T.transpose(h, (0, 2, 1)))


def forward_graph(mp: ModelParams, clouds, train: bool) -> Tuple[Tensor, _Graph]:
    g = _Graph(mp, train)
    glob, _, _ = encode(g, clouds)
    return decode(g, glob), g


def forward(mp: ModelParams, cloud, mode: str = "eval") -> PointCloud:
    """Dense ``n_out x 3`` reconstruction of one normalised input cloud."""
    if mode not in ("train", "eval"):
        raise ModelError(f"mode must be 'train' or 'eval', got {mode!r}")
    out, _ = forward_graph(mp, [cloud], train=(mode == "train"))
    return PointCloud(out.data[0])


def forward_batch(mp: ModelParams, clouds, mode: str = "eval") -> np.ndarray:
    out, _ = forward_graph(mp, clouds, train=(mode == "train"))
    return out.data


def pooled_features(mp: ModelParams, cloud) -> Tuple[np.ndarray, np.ndarray]:
    """Eval-mode ``(max_pooled, attention_pooled)`` feature vectors of one cloud."""
    g = _Graph(mp, train=False)
    _, pooled, att = encode(g, [cloud])
    return pooled.data[0], att.data[0]


def chamfer_loss_and_grad(mp: ModelParams, batch, alpha: float = 100.0, train: bool = True):
    """``alpha`` times the batch-mean Chamfer distance, and its gradient per parameter.

    ``batch`` is a sequence of ``(input, target)`` point arrays. Running
    statistics are left untouched; the batch statistics used are returned as
    the third element for the caller to fold in.
    """
    if len(batch) == 0:
        raise ModelError("empty batch")
    inputs = [b[0] for b in batch]
    targets = [b[1].points if isinstance(b[1], PointCloud) else np.asarray(b[1], dtype=np.float64)
               for b in batch]
    pred, g = forward_graph(mp, inputs, train)
    cd = T.chamfer_batch(pred, targets, nearest_neighbors)
    loss = T.scale(cd, alpha)
    if not np.isfinite(loss.data):
        for i, b in enumerate(batch):
            if not np.all(np.isfinite(pred.data[i])):
                raise ModelError(f"non-finite loss on batch sample {i}")
        raise ModelError("non-finite loss")
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in g.t.items()}
    return float(loss.data), grads, g.stats


def reconstruct(mp: ModelParams, cloud: PointCloud, n_min: int = 1) -> PointCloud:
    """Eval-mode reconstruction of a cloud already normalised to the unit cube."""
    if len(cloud) < n_min:
        raise ModelError(f"reconstruction needs at least N_min = {n_min} points, got {len(cloud)}")
    return forward(mp, cloud, "eval")


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------


def save_params(mp: ModelParams, path) -> None:
    """``ACTR`` container: version, tensor count, then (name, shape, float32 data) records."""
    items = sorted(mp.params.items()) + sorted(mp.buffers.items())
    chunks = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(items))]
    for name, arr in items:
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ModelFormatError("truncated model file")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _infer_arch(tensors: Dict[str, np.ndarray]) -> Architecture:
    try:
        n_enc = 1 + max(int(k.split(".")[1]) for k in tensors if k.startswith("enc.") and k.endswith(".W"))
        enc = tuple(tensors[f"enc.{i}.W"].shape[1] for i in range(n_enc))
        n_dec = 1 + max(int(k.split(".")[2]) for k in tensors if k.startswith("dec.deconv.") and k.endswith(".W"))
        dec = tuple(tensors[f"dec.deconv.{k}.W"].shape[1] for k in range(n_dec))
        c0 = tensors["dec.deconv.0.W"].shape[0]
        kernel = tensors["dec.deconv.0.W"].shape[2]
        fc = tensors["dec.fc.W"].shape[1]
        qk = tensors["sa.G.W"].shape[1]
    except (KeyError, ValueError, IndexError) as exc:
        raise ModelFormatError(f"model file lacks expected tensors: {exc}") from exc
    if fc % c0:
        raise ModelFormatError("decoder FC width is not a multiple of its channel count")
    return Architecture(enc, qk, fc // c0, c0, dec, kernel)


def load_params(path) -> ModelParams:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MODEL_MAGIC:
        raise ModelFormatError("bad magic: not an ACTR model file")
    version, count = r.unpack("<II")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported version {version}")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float64).reshape(shape)
    if r.pos != len(r.raw):
        raise ModelFormatError("trailing bytes after tensor table")
    arch = _infer_arch(tensors)
    ref = init_params(arch, 0)
    missing = (set(ref.params) | set(ref.buffers)) - set(tensors)
    if missing:
        raise ModelFormatError(f"model file is missing tensors: {sorted(missing)[:5]}")
    for k, v in tensors.items():
        expect = ref.params.get(k, ref.buffers.get(k))
        if expect is None or expect.shape != v.shape:
            raise ModelFormatError(f"unexpected tensor {k!r} with shape {v.shape}")
    params = {k: tensors[k] for k in ref.params}
    buffers = {k: tensors[k] for k in ref.buffers}
    return ModelParams(arch, params, buffers)
