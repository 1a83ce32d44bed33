"""CNN, final-frame RNN and frame-target GRU quality regressors.

Every model maps features to scores in (0, 1). Parameters live in an
ordered ``params`` dict of :class:`~omoq.autodiff.Tensor`; batch-norm
running statistics live in ``buffers``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .autodiff.recurrent import gru_layer, lstm_layer


class ModelError(ValueError):
    pass


# -- specs -----------------------------------------------------------------------


@dataclass
class CnnSpec:
    in_height: int = 256
    in_width: int = 53
    pane_layout: str = "stack"  # "stack": one channel, features stacked; "channels": split into 2
    channels: tuple = (16, 32, 64, 32)
    kernels: tuple = (5, 3, 3, 3)
    pool_after: tuple = (0, 1)
    fc_sizes: tuple = (128, 128, 128)
    dropout: float = 0.10
    family: str = field(default="cnn", init=False)

    @property
    def in_channels(self) -> int:
        return 1 if self.pane_layout == "stack" else 2

    def conv_output_shape(self) -> tuple[int, int, int]:
        """Shape (C, H, W) after the conv stack; raises if a kernel stops fitting."""
        if self.pane_layout not in ("stack", "channels"):
            raise ModelError(f"unknown pane layout {self.pane_layout!r}")
        h = self.in_height // self.in_channels
        w = self.in_width
        for i, k in enumerate(self.kernels):
            if h < k or w < k:
                raise ModelError(f"conv{i + 1} kernel {k} does not fit a {h}x{w} map; input width {self.in_width} too short")
            h, w = h - k + 1, w - k + 1
            if i in self.pool_after:
                h, w = h // 2, w // 2
                if h < 1 or w < 1:
                    raise ModelError(f"pool after conv{i + 1} leaves an empty map")
        return self.channels[-1], h, w


@dataclass
class RnnFfSpec:
    input_dim: int = 256
    cell: str = "gru"
    bidirectional: bool = True
    layers: int = 2
    hidden: int | None = None  # defaults to n_directions * input_dim
    dropout: float = 0.10
    fc_sizes: tuple = (256, 128)
    family: str = field(default="rnn_ff", init=False)

    def __post_init__(self):
        if self.hidden is None:
            self.hidden = self.directions * self.input_dim
        if self.cell not in ("gru", "lstm"):
            raise ModelError(f"unknown cell {self.cell!r}")
        if self.hidden <= 0:
            raise ModelError("hidden size must be positive")

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1


@dataclass
class RnnFtSpec:
    input_dim: int = 256
    bidirectional: bool = True
    layers: int = 2
    hidden: int = 256
    dropout: float = 0.10
    collapse: str = "mean"
    cell: str = field(default="gru", init=False)
    family: str = field(default="rnn_ft", init=False)

    def __post_init__(self):
        if self.collapse not in COLLAPSE_MODES:
            raise ModelError(f"collapse must be one of {COLLAPSE_MODES}")

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1


COLLAPSE_MODES = ("mean", "median", "min", "max")
SPEC_TYPES = {"cnn": CnnSpec, "rnn_ff": RnnFfSpec, "rnn_ft": RnnFtSpec}


def spec_to_dict(spec) -> dict:
    d = asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def spec_from_dict(d: dict):
    d = dict(d)
    family = d.pop("family")
    cls = SPEC_TYPES[family]
    if family == "rnn_ft":
        d.pop("cell", None)
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**d)


# -- base ----------------------------------------------------------------------------


class Model:
    spec = None

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _add(self, name, shape, rng, fan_in=None, fill=None):
        if fill is not None:
            data = np.full(shape, fill, dtype=self.dtype)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        self.params[name] = Tensor(data, requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.params.items()}
        arrays.update({f"buffer:{name}": b for name, b in self.buffers.items()})
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ModelError(f"checkpoint lacks parameter {name!r}")
            if arrays[name].shape != p.shape:
                raise ModelError(f"parameter {name!r}: shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=self.dtype)
        for name in self.buffers:
            self.buffers[name] = np.array(arrays[f"buffer:{name}"], dtype=self.dtype)

    def zero_(self) -> None:
        """Set every parameter to zero (used for closed-form checks)."""
        for p in self.params.values():
            p.data[...] = 0


def _linear_params(model, name, n_in, n_out, rng):
    model._add(f"{name}.weight", (n_out, n_in), rng, fan_in=n_in)
    model._add(f"{name}.bias", (n_out,), rng, fan_in=n_in)


def _linear(model, name, x):
    return ops.linear(x, model.params[f"{name}.weight"], model.params[f"{name}.bias"])


# -- CNN --------------------------------------------------------------------------------


class CnnModel(Model):
    """Conv stack -> flatten -> dropout -> three FC layers (residual on 2 and 3) -> sigmoid."""

    def __init__(self, spec: CnnSpec, seed: int = 0, dtype=np.float32):
        super().__init__(dtype)
        self.spec = spec
        c_out, h, w = spec.conv_output_shape()
        rng = np.random.default_rng(seed)
        c_in = spec.in_channels
        for i, (c, k) in enumerate(zip(spec.channels, spec.kernels)):
            fan = c_in * k * k
            self._add(f"conv{i}.weight", (c, c_in, k, k), rng, fan_in=fan)
            self._add(f"conv{i}.bias", (c,), rng, fan_in=fan)
            self._add(f"bn{i}.gamma", (c,), rng, fill=1.0)
            self._add(f"bn{i}.beta", (c,), rng, fill=0.0)
            self.buffers[f"bn{i}.mean"] = np.zeros(c, dtype=self.dtype)
            self.buffers[f"bn{i}.var"] = np.ones(c, dtype=self.dtype)
            c_in = c
        n_in = c_out * h * w
        for i, n in enumerate(spec.fc_sizes):
            _linear_params(self, f"fc{i}", n_in, n, rng)
            n_in = n
        _linear_params(self, "out", n_in, 1, rng)
        self.flat_dim = c_out * h * w

    def make_pane(self, segment: np.ndarray) -> np.ndarray:
        """(L_min, D_F) feature segment -> (C, H, W) input pane, time on the width axis."""
        spec = self.spec
        if segment.shape != (spec.in_width, spec.in_height):
            raise ModelError(f"CNN expects a ({spec.in_width}, {spec.in_height}) segment, got {segment.shape}")
        pane = segment.T
        if spec.pane_layout == "channels":
            return pane.reshape(2, spec.in_height // 2, spec.in_width)
        return pane[None]

    def forward(self, panes, training: bool = False, rng=None) -> Tensor:
        """``panes``: (B, C, H, W) -> scores (B,)."""
        spec = self.spec
        x = Tensor(np.asarray(panes, dtype=self.dtype)) if not isinstance(panes, Tensor) else panes
        p = self.params
        for i in range(len(spec.channels)):
            x = ops.conv2d(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
            x = ops.batch_norm(x, p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
                               self.buffers[f"bn{i}.mean"], self.buffers[f"bn{i}.var"], training)
            x = ops.relu(x)
            if i in spec.pool_after:
                x = ops.maxpool2d(x, 2, 2)
        x = x.reshape(x.shape[0], -1)
        x = ops.dropout(x, spec.dropout, training, rng)
        x = ops.relu(_linear(self, "fc0", x))
        for i in range(1, len(spec.fc_sizes)):
            x = ops.relu(_linear(self, f"fc{i}", x) + x)
        return ops.sigmoid(_linear(self, "out", x)).reshape(-1)

    def score_segments(self, segments: list[np.ndarray]) -> np.ndarray:
        with no_grad():
            panes = np.stack([self.make_pane(s) for s in segments])
            return self.forward(panes, training=False).data.astype(np.float64)


# -- recurrent ------------------------------------------------------------------------------


def pad_batch(feats: list[np.ndarray], dtype=np.float32) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero-pad (L_i, D) arrays to (B, T, D); returns (batch, mask, lengths)."""
    if not feats:
        raise ModelError("empty batch")
    lengths = np.array([f.shape[0] for f in feats])
    if np.any(lengths < 1):
        raise ModelError("every sequence needs at least one frame")
    dims = {f.shape[1] for f in feats}
    if len(dims) != 1:
        raise ModelError(f"inconsistent feature dims {sorted(dims)}")
    t_max = int(lengths.max())
    batch = np.zeros((len(feats), t_max, dims.pop()), dtype=dtype)
    mask = np.zeros((len(feats), t_max), dtype=dtype)
    for i, f in enumerate(feats):
        batch[i, : len(f)] = f
        mask[i, : len(f)] = 1
    return batch, mask, lengths


class _Recurrent(Model):
    def _init_rnn(self, spec, gate_count, rng):
        n_in = spec.input_dim
        for layer in range(spec.layers):
            for d in range(spec.directions):
                name = f"rnn{layer}.{'bwd' if d else 'fwd'}"
                fan = spec.hidden
                self._add(f"{name}.w_ih", (gate_count * spec.hidden, n_in), rng, fan_in=fan)
                self._add(f"{name}.w_hh", (gate_count * spec.hidden, spec.hidden), rng, fan_in=fan)
                self._add(f"{name}.b_ih", (gate_count * spec.hidden,), rng, fan_in=fan)
                self._add(f"{name}.b_hh", (gate_count * spec.hidden,), rng, fan_in=fan)
            n_in = spec.directions * spec.hidden

    def _check_input(self, x):
        if x.shape[-1] != self.spec.input_dim:
            raise ModelError(f"feature dim {x.shape[-1]} does not match model input_dim {self.spec.input_dim}")

    def run_rnn(self, x, mask) -> tuple[Tensor, list[Tensor]]:
        """Stacked (bi)directional recurrence. Returns (sequence output, last layer's direction outputs)."""
        spec = self.spec
        layer_fn = lstm_layer if spec.cell == "lstm" else gru_layer
        out = x
        dirs = []
        for layer in range(spec.layers):
            dirs = []
            for d in range(spec.directions):
                name = f"rnn{layer}.{'bwd' if d else 'fwd'}"
                p = self.params
                dirs.append(layer_fn(out, p[f"{name}.w_ih"], p[f"{name}.w_hh"], p[f"{name}.b_ih"], p[f"{name}.b_hh"],
                                     mask=mask, reverse=bool(d)))
            out = dirs[0] if len(dirs) == 1 else ops.concat(dirs, axis=2)
        return out, dirs


class RnnFfModel(_Recurrent):
    """Many-to-one RNN: final-frame state -> dropout -> FC/LN/ReLU x2 -> sigmoid."""

    def __init__(self, spec: RnnFfSpec, seed: int = 0, dtype=np.float32):
        super().__init__(dtype)
        self.spec = spec
        rng = np.random.default_rng(seed)
        self._init_rnn(spec, 4 if spec.cell == "lstm" else 3, rng)
        n_in = spec.directions * spec.hidden
        for i, n in enumerate(spec.fc_sizes):
            _linear_params(self, f"fc{i}", n_in, n, rng)
            self._add(f"ln{i}.gamma", (n,), rng, fill=1.0)
            self._add(f"ln{i}.beta", (n,), rng, fill=0.0)
            n_in = n
        _linear_params(self, "out", n_in, 1, rng)

    def forward(self, batch, mask, lengths, training: bool = False, rng=None) -> Tensor:
        """``batch``: (B, T, D) zero-padded -> scores (B,)."""
        x = Tensor(np.asarray(batch, dtype=self.dtype))
        self._check_input(x)
        lengths = np.asarray(lengths)
        _, dirs = self.run_rnn(x, mask)
        finals = [dirs[0][np.arange(x.shape[0]), lengths - 1]]
        if len(dirs) == 2:
            finals.append(dirs[1][:, 0, :])
        h = finals[0] if len(finals) == 1 else ops.concat(finals, axis=1)
        h = ops.dropout(h, self.spec.dropout, training, rng)
        for i in range(len(self.spec.fc_sizes)):
            h = _linear(self, f"fc{i}", h)
            h = ops.relu(ops.layer_norm(h, self.params[f"ln{i}.gamma"], self.params[f"ln{i}.beta"]))
        return ops.sigmoid(_linear(self, "out", h)).reshape(-1)

    def score(self, feats: list[np.ndarray]) -> np.ndarray:
        with no_grad():
            batch, mask, lengths = pad_batch(feats, self.dtype)
            return self.forward(batch, mask, lengths).data.astype(np.float64)


def collapse_frames(frames: np.ndarray, mask: np.ndarray, mode: str = "mean") -> np.ndarray:
    """Reduce (B, T) frame scores to one score per clip over valid frames only."""
    frames = np.asarray(frames, dtype=np.float64)
    mask = np.asarray(mask) > 0
    out = np.empty(frames.shape[0])
    for i in range(frames.shape[0]):
        valid = frames[i][mask[i]]
        if valid.size == 0:
            raise ModelError("cannot collapse a clip with no valid frames")
        if mode == "mean":
            out[i] = valid.mean()
        elif mode == "median":
            out[i] = np.median(valid)
        elif mode == "min":
            out[i] = valid.min()
        elif mode == "max":
            out[i] = valid.max()
        else:
            raise ModelError(f"unknown collapse mode {mode!r}")
    return out


class RnnFtModel(_Recurrent):
    """Frame-target GRU: every frame's state -> dropout -> FC -> sigmoid."""

    def __init__(self, spec: RnnFtSpec, seed: int = 0, dtype=np.float32):
        super().__init__(dtype)
        self.spec = spec
        rng = np.random.default_rng(seed)
        self._init_rnn(spec, 3, rng)
        _linear_params(self, "out", spec.directions * spec.hidden, 1, rng)

    def forward(self, batch, mask, lengths=None, training: bool = False, rng=None) -> Tensor:
        """``batch``: (B, T, D) -> per-frame scores (B, T); padded frames are garbage, mask them."""
        x = Tensor(np.asarray(batch, dtype=self.dtype))
        self._check_input(x)
        out, _ = self.run_rnn(x, mask)
        out = ops.dropout(out, self.spec.dropout, training, rng)
        b, t, _ = out.shape
        return ops.sigmoid(_linear(self, "out", out)).reshape(b, t)

    def score_frames(self, feats: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        with no_grad():
            batch, mask, lengths = pad_batch(feats, self.dtype)
            return self.forward(batch, mask, lengths).data.astype(np.float64), mask

    def score(self, feats: list[np.ndarray], collapse: str | None = None) -> np.ndarray:
        frames, mask = self.score_frames(feats)
        return collapse_frames(frames, mask, collapse or self.spec.collapse)


MODEL_TYPES = {"cnn": CnnModel, "rnn_ff": RnnFfModel, "rnn_ft": RnnFtModel}


def build_model(spec, seed: int = 0, dtype=np.float32) -> Model:
    return MODEL_TYPES[spec.family](spec, seed=seed, dtype=dtype)


# -- checkpoints ---------------------------------------------------------------------------

CKPT_MAGIC = b"OMOQCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: object
    arrays: dict
    metadata: dict

    def build(self) -> Model:
        model = build_model(self.spec)
        model.load_arrays(self.arrays)
        return model

    @property
    def feature_kind(self) -> str | None:
        return self.metadata.get("feature_kind")


def save_checkpoint(path, model: Model, metadata: dict | None = None) -> None:
    """Versioned container: magic, version, JSON metadata, then named float32 arrays."""
    meta = dict(metadata or {})
    meta["spec"] = spec_to_dict(model.spec)
    _write_checkpoint(path, meta, model.state_arrays())


def _write_checkpoint(path, meta: dict, arrays: dict) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        enc = name.encode("utf-8")
        parts.append(struct.pack("<HB", len(enc), arr.ndim) + enc)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, expected_kind: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    try:
        if raw[:8] != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, meta_len = struct.unpack_from("<II", raw, 8)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
        pos = 16
        meta = json.loads(raw[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<HB", raw, pos)
            pos += 3
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).copy()
            pos += nbytes
        if pos != len(raw):
            raise CheckpointError(f"{path}: trailing bytes after arrays")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    spec = spec_from_dict(meta.pop("spec"))
    ckpt = Checkpoint(spec, arrays, meta)
    if expected_kind is not None and ckpt.feature_kind != expected_kind:
        raise CheckpointError(
            f"{path}: checkpoint was trained on {ckpt.feature_kind!r} features, not {expected_kind!r}"
        )
    return ckpt


def resave_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = dict(ckpt.metadata)
    meta["spec"] = spec_to_dict(ckpt.spec)
    _write_checkpoint(path, meta, ckpt.arrays)
