"""Recurrent convolutional seizure classifier and its checkpoint format.

Architecture (canonical for this artifact):

    per frame   3x16x16 -> conv 32@3x3 pad 1, relu -> pool 2x2
                        -> conv 64@3x3 pad 1, relu -> pool 2x2
                        -> flatten 1024 -> dense 64, relu   (feature vector)
    per window  30 feature vectors -> forward LSTM (128 hidden)
                                   -> backward LSTM (128 hidden, reversed input)
                final hidden states concatenated (256) -> dense 512, relu
                                                       -> dense 2 -> softmax

Total parameter count is frozen at PARAMETER_COUNT; tests assert it so the
architecture cannot drift silently.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import SzDetectError
from .imaging import GRID, Normalizer
from .windowing import BLOCKS_PER_WINDOW


class WrongSequenceLength(SzDetectError):
    pass


class BadMagic(SzDetectError):
    pass


class ShapeMismatchOnLoad(SzDetectError):
    pass


class VersionUnsupported(SzDetectError):
    pass


class TruncatedCheckpoint(SzDetectError):
    pass


N_BANDS = 3
SEQ_LEN = BLOCKS_PER_WINDOW
FEATURE_DIM = 64
HIDDEN_DIM = 128
FC_DIM = 512
N_CLASSES = 2
CONV1_FILTERS = 32
CONV2_FILTERS = 64
FLAT_DIM = CONV2_FILTERS * (GRID // 4) * (GRID // 4)  # 64 * 4 * 4

PARAMETER_COUNT = 415_234

CHECKPOINT_MAGIC = b"SZGD"
CHECKPOINT_VERSION = 1

_GATES = ("i", "f", "g", "o")


@dataclass
class LSTMParams:
    """Four gate blocks over the concatenated [x, h_prev] input."""
    w_i: Tensor
    b_i: Tensor
    w_f: Tensor
    b_f: Tensor
    w_g: Tensor
    b_g: Tensor
    w_o: Tensor
    b_o: Tensor


class Model:
    """Parameter container; all forward passes are free functions over it."""

    def __init__(self, params: dict[str, Tensor]):
        expected = [name for name, _ in _param_spec()]
        if list(params.keys()) != expected:
            raise ShapeMismatchOnLoad(
                f"parameter names do not match architecture: {list(params)[:4]}...")
        for name, shape in _param_spec():
            if params[name].data.shape != shape:
                raise ShapeMismatchOnLoad(
                    f"{name}: expected shape {shape}, got {params[name].data.shape}")
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def lstm(self, direction: str) -> LSTMParams:
        p = self.params
        return LSTMParams(**{
            f"{kind}_{gate}": p[f"lstm_{direction}_{kind}_{gate}"]
            for gate in _GATES for kind in ("w", "b")})

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def conv_tensors(self) -> list[Tensor]:
        return [self.params[n] for n in
                ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fv_w", "fv_b")]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def copy(self) -> "Model":
        return Model({name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                      for name, t in self.params.items()})

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag


def _param_spec() -> list[tuple[str, tuple[int, ...]]]:
    spec: list[tuple[str, tuple[int, ...]]] = [
        ("conv1_w", (CONV1_FILTERS, N_BANDS, 3, 3)),
        ("conv1_b", (CONV1_FILTERS,)),
        ("conv2_w", (CONV2_FILTERS, CONV1_FILTERS, 3, 3)),
        ("conv2_b", (CONV2_FILTERS,)),
        ("fv_w", (FEATURE_DIM, FLAT_DIM)),
        ("fv_b", (FEATURE_DIM,)),
    ]
    gate_in = FEATURE_DIM + HIDDEN_DIM
    for direction in ("fwd", "bwd"):
        for gate in _GATES:
            spec.append((f"lstm_{direction}_w_{gate}", (HIDDEN_DIM, gate_in)))
            spec.append((f"lstm_{direction}_b_{gate}", (HIDDEN_DIM,)))
    spec += [
        ("fc_w", (FC_DIM, 2 * HIDDEN_DIM)),
        ("fc_b", (FC_DIM,)),
        ("out_w", (N_CLASSES, FC_DIM)),
        ("out_b", (N_CLASSES,)),
    ]
    return spec


def _glorot_limit(name: str, shape: tuple[int, ...]) -> float:
    if len(shape) == 4:  # conv kernels
        fan_in = shape[1] * shape[2] * shape[3]
        fan_out = shape[0] * shape[2] * shape[3]
    else:  # dense / gate weights (out, in)
        fan_out, fan_in = shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(seed: int, dtype=np.float32) -> Model:
    """Seeded uniform fan-scaled init; zero biases except forget gate (+1).

    Draw order follows _param_spec, so a seed fully determines the weights.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _param_spec():
        if name.endswith(tuple(f"b_{g}" for g in _GATES)) or name.endswith("_b"):
            data = np.zeros(shape, dtype=dtype)
            if "_b_f" in name:
                data += 1.0  # forget-gate bias starts open
        else:
            lim = _glorot_limit(name, shape)
            data = rng.uniform(-lim, lim, size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True)
    return Model(params)


# --- forward passes ---------------------------------------------------------

def _check_image_shape(shape: tuple[int, ...]) -> bool:
    """Returns True if batched; raises on anything else."""
    if shape[-3:] != (N_BANDS, GRID, GRID) or len(shape) not in (3, 4):
        raise ad.ShapeMismatch(
            f"expected ({N_BANDS}, {GRID}, {GRID}) images, got {shape}")
    return len(shape) == 4


def forward_conv(model: Model, images: Tensor) -> Tensor:
    """Map normalized images to 64-dim feature vectors.

    Accepts a single (3, 16, 16) image (returns shape (64,)) or a batch
    (n, 3, 16, 16) (returns (n, 64)).
    """
    batched = _check_image_shape(images.data.shape)
    x = images if batched else _promote(images)
    x = ad.relu(ad.add_channel_bias(ad.conv2d(x, model["conv1_w"], padding=1),
                                    model["conv1_b"]))
    x = ad.maxpool2d(x)
    x = ad.relu(ad.add_channel_bias(ad.conv2d(x, model["conv2_w"], padding=1),
                                    model["conv2_b"]))
    x = ad.maxpool2d(x)
    x = ad.flatten_rows(x)
    x = ad.relu(ad.dense(x, model["fv_w"], model["fv_b"]))
    return x if batched else _demote(x)


def _promote(t: Tensor) -> Tensor:
    def bwd(g):
        ad._accumulate(t, g[0])
    return ad._make(t.data[np.newaxis], (t,), bwd)


def _demote(t: Tensor) -> Tensor:
    def bwd(g):
        ad._accumulate(t, g[np.newaxis])
    return ad._make(t.data[0], (t,), bwd)


def sequence_logits(model: Model, frames: list[Tensor]) -> Tensor:
    """Logits for a batch of 30-frame windows.

    ``frames`` is a list of 30 tensors, each (batch, 3, 16, 16); frame t of
    every window sits in tensor t.  All frames go through the conv stack as
    one batch, then the two LSTM chains read the feature vectors in opposite
    orders and their final hidden states drive the classifier head.
    """
    if len(frames) != SEQ_LEN:
        raise WrongSequenceLength(f"expected {SEQ_LEN} frames, got {len(frames)}")
    batch = frames[0].data.shape[0]
    for f in frames:
        _check_image_shape(f.data.shape)
        if f.data.ndim != 4 or f.data.shape[0] != batch:
            raise ad.ShapeMismatch("all frames must share one batch size")

    fvs = ad.split_rows(forward_conv(model, ad.stack_rows(frames)), SEQ_LEN)
    dtype = fvs[0].data.dtype

    finals = []
    for direction, order in (("fwd", fvs), ("bwd", fvs[::-1])):
        p = model.lstm(direction)
        h = Tensor(np.zeros((batch, HIDDEN_DIM), dtype=dtype))
        c = Tensor(np.zeros((batch, HIDDEN_DIM), dtype=dtype))
        for x_t in order:
            h, c = ad.lstm_cell(x_t, h, c, p)
        finals.append(h)

    joined = ad.concat(finals[0], finals[1], axis=1)
    hidden = ad.relu(ad.dense(joined, model["fc_w"], model["fc_b"]))
    return ad.dense(hidden, model["out_w"], model["out_b"])


def forward_sequence(model: Model, images: np.ndarray) -> np.ndarray:
    """Class probabilities (p_nonseizure, p_seizure) for one 30-frame window."""
    images = np.asarray(images)
    if images.shape != (SEQ_LEN, N_BANDS, GRID, GRID):
        raise WrongSequenceLength(
            f"expected ({SEQ_LEN}, {N_BANDS}, {GRID}, {GRID}), got {images.shape}")
    with ad.no_grad():
        frames = [Tensor(images[t][np.newaxis]) for t in range(SEQ_LEN)]
        logits = sequence_logits(model, frames)
    return ad.softmax(logits.data)[0]


def batch_probabilities(model: Model, sequences: np.ndarray,
                        chunk: int = 64) -> np.ndarray:
    """Softmax probabilities, shape (n, 2), for (n, 30, 3, 16, 16) pixels."""
    sequences = np.asarray(sequences, dtype=np.float32)
    if sequences.ndim != 5 or sequences.shape[1:] != (SEQ_LEN, N_BANDS, GRID, GRID):
        raise ad.ShapeMismatch(f"expected (n, {SEQ_LEN}, {N_BANDS}, {GRID}, "
                               f"{GRID}), got {sequences.shape}")
    outs = []
    with ad.no_grad():
        for lo in range(0, sequences.shape[0], chunk):
            part = sequences[lo:lo + chunk]
            frames = [Tensor(part[:, t]) for t in range(SEQ_LEN)]
            outs.append(ad.softmax(sequence_logits(model, frames).data))
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, N_CLASSES))


# --- pretraining head -------------------------------------------------------

@dataclass
class PretrainHead:
    """Throwaway classifier over single-frame feature vectors.

    The conv tensors are shared with the parent model by reference, so
    pretraining updates land directly in the full model.
    """
    w: Tensor
    b: Tensor


def attach_pretrain_head(seed: int, dtype=np.float32) -> PretrainHead:
    rng = np.random.default_rng(seed)
    lim = float(np.sqrt(6.0 / (FEATURE_DIM + N_CLASSES)))
    w = rng.uniform(-lim, lim, size=(N_CLASSES, FEATURE_DIM)).astype(dtype)
    return PretrainHead(w=Tensor(w, requires_grad=True),
                        b=Tensor(np.zeros(N_CLASSES, dtype=dtype),
                                 requires_grad=True))


def pretrain_logits(model: Model, head: PretrainHead, images: Tensor) -> Tensor:
    return ad.dense(forward_conv(model, images), head.w, head.b)


# --- checkpoint format ------------------------------------------------------
#
# Byte layout (little-endian throughout):
#   0:4    magic  b"SZGD"
#   4:8    u32    format version (currently 1)
#   8:12   u32    header length in bytes
#   12:..  JSON   {"meta": {...}, "normalizer": {"mean": [3], "std": [3]},
#                  "params": [{"name": str, "shape": [int, ...]}, ...]}
#   ..:    data   concatenated row-major float32 arrays, header order

def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_checkpoint(path, model: Model, normalizer: Normalizer | None = None,
                    meta: dict | None = None) -> None:
    header = {
        "meta": dict(meta or {}),
        "normalizer": None if normalizer is None else {
            "mean": [float(v) for v in normalizer.mean],
            "std": [float(v) for v in normalizer.std],
        },
        "params": [{"name": name, "shape": list(t.data.shape)}
                   for name, t in model.params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for t in model.params.values():
            fh.write(np.ascontiguousarray(
                t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[Model, Normalizer | None, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise VersionUnsupported(f"{path}: version {version}, expected "
                                 f"{CHECKPOINT_VERSION}")
    if len(raw) < 12 + header_len:
        raise TruncatedCheckpoint(f"{path}: header cut short")
    try:
        header = json.loads(raw[12:12 + header_len])
    except ValueError as exc:
        raise TruncatedCheckpoint(f"{path}: unreadable header: {exc}") from None

    expected = _param_spec()
    listed = [(p["name"], tuple(p["shape"])) for p in header["params"]]
    if [n for n, _ in listed] != [n for n, _ in expected]:
        raise ShapeMismatchOnLoad(f"{path}: parameter names do not match "
                                  "the architecture")
    for (name, shape), (_, want) in zip(listed, expected):
        if shape != want:
            raise ShapeMismatchOnLoad(f"{path}: {name} has shape {shape}, "
                                      f"expected {want}")

    offset = 12 + header_len
    params: dict[str, Tensor] = {}
    for name, shape in listed:
        n_bytes = int(np.prod(shape)) * 4
        chunk = raw[offset:offset + n_bytes]
        if len(chunk) != n_bytes:
            raise TruncatedCheckpoint(f"{path}: data ends inside {name}")
        params[name] = Tensor(
            np.frombuffer(chunk, dtype="<f4").reshape(shape).copy(),
            requires_grad=True)
        offset += n_bytes

    norm = None
    if header.get("normalizer"):
        norm = Normalizer(
            mean=np.asarray(header["normalizer"]["mean"], dtype=np.float64),
            std=np.asarray(header["normalizer"]["std"], dtype=np.float64))
    return Model(params), norm, header.get("meta", {})
