"""Dataset manifests, segment policies, the training loop and inference."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import features as F
from .audio import load_clip
from .autodiff import AdamW, no_grad, ops
from .metrics import MetricError, SelectionRecord, SplitMetrics, pearson, rmse, select_best, write_selection_report
from .models import (
    CnnModel, CnnSpec, Model, RnnFfModel, RnnFfSpec, RnnFtModel, RnnFtSpec,
    collapse_frames, load_checkpoint, pad_batch, save_checkpoint,
)

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ["path", "smos", "method", "beta", "class", "split"]
METRIC_FIELDS = ["epoch", "split", "rmse_15", "pearson"]
SIGNAL_CLASSES = ("Musical", "Solo", "Voice")
SEGMENT_POLICIES = ("truncate_random", "full", "repeat_to_max")
EVAL_SEGMENTS = 16
LR_FALLBACK = 1e-5


class TrainingError(RuntimeError):
    pass


# -- targets -------------------------------------------------------------------


def scale_target(smos):
    """Map opinion scores from [1, 5] onto [0, 1]."""
    s = np.asarray(smos, dtype=np.float64)
    if np.any((s < 1) | (s > 5)) or np.any(np.isnan(s)):
        raise ValueError(f"SMOS must lie in [1, 5], got {smos}")
    out = (s - 1.0) / 4.0
    return float(out) if out.ndim == 0 else out


def rescale_omos(y):
    """Inverse of :func:`scale_target`."""
    out = 4.0 * np.asarray(y, dtype=np.float64) + 1.0
    return float(out) if out.ndim == 0 else out


# -- manifest --------------------------------------------------------------------


@dataclass
class ManifestRow:
    path: str
    smos: float
    method: str
    beta: str
    cls: str
    split: str

    @property
    def beta_value(self) -> float:
        return float(self.beta)


def read_manifest(path) -> list[ManifestRow]:
    """Read ``path,smos,method,beta,class,split``; relative paths resolve against the manifest's directory."""
    path = Path(path)
    base = path.parent
    rows, seen = [], set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise TrainingError(f"{path}: manifest lacks columns {sorted(missing)}")
        for lineno, r in enumerate(reader, start=2):
            audio = Path(r["path"])
            if not audio.is_absolute():
                audio = base / audio
            key = str(audio.resolve())
            if key in seen:
                raise TrainingError(f"{path}:{lineno}: duplicate path {r['path']}")
            seen.add(key)
            smos = float(r["smos"])
            if not 1.0 <= smos <= 5.0:
                raise TrainingError(f"{path}:{lineno}: SMOS {smos} outside [1, 5]")
            if not float(r["beta"]) > 0:
                raise TrainingError(f"{path}:{lineno}: beta must be positive")
            split = r["split"].strip()
            if split not in ("train", "val", "test"):
                raise TrainingError(f"{path}:{lineno}: unknown split {split!r}")
            rows.append(ManifestRow(key, smos, r["method"], r["beta"].strip(), r["class"], split))
    return rows


def write_manifest(path, rows: list[ManifestRow], relative_to=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            p = Path(r.path)
            if relative_to is not None:
                p = p.relative_to(relative_to)
            w.writerow([str(p), repr(r.smos), r.method, r.beta, r.cls, r.split])


def assign_validation(rows: list[ManifestRow], seed: int, fraction: float = 0.1) -> list[ManifestRow]:
    """Move 10% of the training rows into ``val`` unless a val split already exists.

    Rows are shuffled with ``seed`` within each method group and the last
    ``round(fraction * n)`` of each group go to validation.
    """
    if any(r.split == "val" for r in rows):
        return rows
    rng = np.random.default_rng(seed)
    out = list(rows)
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(rows):
        if r.split == "train":
            groups.setdefault(r.method, []).append(i)
    for method in sorted(groups):
        idx = np.array(groups[method])
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(fraction * len(idx)))
        for i in idx[len(idx) - n_val :]:
            out[i] = replace(rows[i], split="val")
    return out


# -- segments ------------------------------------------------------------------------


def eval_starts(n_frames: int, seg_len: int, count: int = EVAL_SEGMENTS) -> list[int]:
    """Uniformly spaced window starts ``floor(i * (L - L_min) / (count - 1))``."""
    span = n_frames - seg_len
    if span < 0:
        raise TrainingError(f"clip of {n_frames} frames is shorter than the {seg_len}-frame segment")
    if count == 1:
        return [0]
    return [(i * span) // (count - 1) for i in range(count)]


def make_segments(feat: np.ndarray, policy: str, seg_len: int | None = None, rng=None,
                  train: bool = True, max_len: int | None = None, count: int = EVAL_SEGMENTS) -> list[np.ndarray]:
    """Cut a (L, D) feature array according to a segment policy.

    ``truncate_random``: one random ``seg_len`` window when training, ``count``
    uniformly spaced windows otherwise. ``full``: the whole sequence.
    ``repeat_to_max``: frames tiled up to ``max_len``.
    """
    n = feat.shape[0]
    if policy == "full":
        return [feat]
    if policy == "repeat_to_max":
        if max_len is None or max_len < 1:
            raise TrainingError("repeat_to_max needs max_len")
        return [feat[np.arange(max_len) % n]]
    if policy != "truncate_random":
        raise TrainingError(f"unknown segment policy {policy!r}")
    if seg_len is None:
        raise TrainingError("truncate_random needs seg_len")
    if n < seg_len:
        raise TrainingError(f"clip of {n} frames is shorter than the {seg_len}-frame segment")
    if train:
        start = int(rng.integers(0, n - seg_len + 1))
        return [feat[start : start + seg_len]]
    return [feat[s : s + seg_len] for s in eval_starts(n, seg_len, count)]


# -- configuration ----------------------------------------------------------------------

MODEL_NAMES = ("cnn", "gru-ff", "bgru-ff", "lstm-ff", "blstm-ff", "gru-ft", "bgru-ft")


@dataclass
class TrainConfig:
    model: str = "bgru-ft"
    features: str = "mfcc_d"
    epochs: int | None = None
    batch_size: int | None = None
    lr: float = 1e-4
    lr_fallback: bool = True
    weight_decay: float = 0.01
    seed: int = 0
    segment_policy: str | None = None
    eval_segments: int = EVAL_SEGMENTS
    standardize: str = "none"
    hidden: int | None = None
    collapse: str = "mean"
    dropout: float = 0.10
    pane_layout: str = "stack"

    def __post_init__(self):
        if self.model not in MODEL_NAMES:
            raise TrainingError(f"unknown model {self.model!r}; choose from {MODEL_NAMES}")
        F.feature_dim(self.features)
        if self.model == "cnn":
            self.epochs = 100 if self.epochs is None else self.epochs
            self.batch_size = 132 if self.batch_size is None else self.batch_size
            self.segment_policy = self.segment_policy or "truncate_random"
            if self.segment_policy != "truncate_random":
                raise TrainingError("the CNN needs fixed-length input: use segment policy truncate_random")
        else:
            self.epochs = 30 if self.epochs is None else self.epochs
            self.batch_size = 48 if self.batch_size is None else self.batch_size
            self.segment_policy = self.segment_policy or "full"
        if self.segment_policy not in SEGMENT_POLICIES:
            raise TrainingError(f"unknown segment policy {self.segment_policy!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_segments < 1:
            raise TrainingError("epochs, batch size and eval segment count must be positive")
        if self.lr < 0:
            raise TrainingError("learning rate must be non-negative")
        if self.model.endswith("-ff") and self.model != "cnn" and self.features in ("mag", "phase", "power", "mag_phase") and self.hidden is None:
            self.hidden = 512

    @property
    def family(self) -> str:
        if self.model == "cnn":
            return "cnn"
        return "rnn_ft" if self.model.endswith("-ft") else "rnn_ff"

    @property
    def bidirectional(self) -> bool:
        return self.model.startswith("b")

    @property
    def cell(self) -> str:
        return "lstm" if "lstm" in self.model else "gru"


# -- data --------------------------------------------------------------------------------


@dataclass
class Dataset:
    rows: dict  # split -> list[ManifestRow]
    feats: dict  # split -> list[np.ndarray]
    targets: dict  # split -> np.ndarray of SMOS on [1, 5]

    @property
    def all_lengths(self) -> list[int]:
        return [f.shape[0] for s in self.feats.values() for f in s]


def load_features(rows: list[ManifestRow], kind: str, cache_dir=None) -> list[F.FeatureMatrix]:
    cache = F.FeatureCache(cache_dir) if cache_dir else None
    out = []
    for r in rows:
        try:
            out.append(cache.get(r.path, kind) if cache else F.extract(load_clip(r.path), kind))
        except (F.FeatureError, ValueError) as exc:
            raise TrainingError(f"{r.path}: {exc}") from exc
    if cache:
        cache.flush()
    return out


def build_dataset(rows: list[ManifestRow], feats: list[F.FeatureMatrix], seed: int) -> Dataset:
    rows = assign_validation(rows, seed)
    by_split = {s: [] for s in ("train", "val", "test")}
    for r, f in zip(rows, feats):
        by_split[r.split].append((r, f.data))
    for split, items in by_split.items():
        if not items:
            raise TrainingError(f"empty {split} split")
    return Dataset(
        rows={s: [r for r, _ in v] for s, v in by_split.items()},
        feats={s: [f for _, f in v] for s, v in by_split.items()},
        targets={s: np.array([r.smos for r, _ in v]) for s, v in by_split.items()},
    )


# -- model construction --------------------------------------------------------------------


def make_model(cfg: TrainConfig, feature_dim: int, seg_len: int | None, dtype=np.float32) -> Model:
    if cfg.family == "cnn":
        spec = CnnSpec(in_height=feature_dim, in_width=seg_len, pane_layout=cfg.pane_layout, dropout=cfg.dropout)
        return CnnModel(spec, seed=cfg.seed, dtype=dtype)
    if cfg.family == "rnn_ff":
        spec = RnnFfSpec(input_dim=feature_dim, cell=cfg.cell, bidirectional=cfg.bidirectional,
                         hidden=cfg.hidden, dropout=cfg.dropout)
        return RnnFfModel(spec, seed=cfg.seed, dtype=dtype)
    spec = RnnFtSpec(input_dim=feature_dim, bidirectional=cfg.bidirectional,
                     hidden=cfg.hidden or 256, dropout=cfg.dropout, collapse=cfg.collapse)
    return RnnFtModel(spec, seed=cfg.seed, dtype=dtype)


@dataclass
class Scorer:
    """Eval-mode clip scoring on the [0, 1] scale for any model family."""

    model: Model
    policy: str
    seg_len: int | None = None
    max_len: int | None = None
    eval_segments: int = EVAL_SEGMENTS
    chunk: int = 64

    def score(self, feats: list[np.ndarray]) -> np.ndarray:
        if isinstance(self.model, CnnModel):
            return np.array([self.segment_scores(f).mean() for f in feats])
        out = []
        for i in range(0, len(feats), self.chunk):
            chunk = [self._rnn_input(f) for f in feats[i : i + self.chunk]]
            out.append(self.model.score(chunk))
        return np.concatenate(out)

    def segment_scores(self, feat: np.ndarray) -> np.ndarray:
        segs = make_segments(feat, "truncate_random", self.seg_len, train=False, count=self.eval_segments)
        return self.model.score_segments(segs)

    def _rnn_input(self, feat):
        if self.policy == "repeat_to_max":
            return make_segments(feat, "repeat_to_max", max_len=self.max_len)[0]
        return feat


# -- training -------------------------------------------------------------------------------


@dataclass
class TrainResult:
    config: TrainConfig
    records: list[SelectionRecord]
    metric_rows: list[dict]
    best: SelectionRecord
    model: Model
    best_arrays: dict
    metadata: dict
    lr_used: float
    restarted: bool = False
    train_losses: list[float] = field(default_factory=list)


def _batch_loss(model, cfg, feats, targets, rng, seg_len, max_len):
    y = scale_target(targets).astype(model.dtype)
    if cfg.family == "cnn":
        segs = [make_segments(f, "truncate_random", seg_len, rng=rng)[0] for f in feats]
        pred = model.forward(np.stack([model.make_pane(s) for s in segs]), training=True, rng=rng)
        return ops.rmse_loss(pred, y)
    if cfg.segment_policy == "truncate_random":
        feats = [make_segments(f, "truncate_random", seg_len, rng=rng)[0] for f in feats]
    elif cfg.segment_policy == "repeat_to_max":
        feats = [make_segments(f, "repeat_to_max", max_len=max_len)[0] for f in feats]
    batch, mask, lengths = pad_batch(feats, model.dtype)
    if cfg.family == "rnn_ff":
        return ops.rmse_loss(model.forward(batch, mask, lengths, training=True, rng=rng), y)
    frames = model.forward(batch, mask, lengths, training=True, rng=rng)
    loss, _ = ops.masked_frame_mse(frames, y, mask)
    return loss


def _split_metrics(scorer: Scorer, data: Dataset) -> dict:
    out = {}
    for split in ("train", "val", "test"):
        est = rescale_omos(scorer.score(data.feats[split]))
        tgt = data.targets[split]
        try:
            rho = pearson(est, tgt)
        except MetricError:
            rho = float("nan")
        out[split] = (rmse(est, tgt), rho)
    return out


def _run(cfg: TrainConfig, data: Dataset, stats, lr: float, dtype, progress=None):
    feature_dim = data.feats["train"][0].shape[1]
    seg_len = min(data.all_lengths)
    max_len = max(data.all_lengths)
    model = make_model(cfg, feature_dim, seg_len if (cfg.family == "cnn" or cfg.segment_policy == "truncate_random") else None, dtype)
    opt = AdamW(model.parameters(), lr=lr, weight_decay=cfg.weight_decay)
    scorer = Scorer(model, cfg.segment_policy, seg_len, max_len, cfg.eval_segments)
    train_feats, train_tgts = data.feats["train"], data.targets["train"]
    records, metric_rows, losses = [], [], []
    best, best_arrays = None, None
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_feats))
        epoch_loss = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = _batch_loss(model, cfg, [train_feats[i] for i in idx], train_tgts[idx], rng, seg_len, max_len)
            if not np.isfinite(loss.data).all():
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch starting {start} (lr={lr}, seed={cfg.seed})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss.append(float(loss.data))
        losses.append(float(np.mean(epoch_loss)))
        m = _split_metrics(scorer, data)
        for split in ("train", "val", "test"):
            metric_rows.append({"epoch": epoch, "split": split, "rmse_15": m[split][0], "pearson": m[split][1]})
        rec = SelectionRecord(cfg.seed, epoch, SplitMetrics(
            tuple(m[s][1] for s in ("train", "val", "test")),
            tuple(m[s][0] for s in ("train", "val", "test")),
        ))
        records.append(rec)
        if not math.isnan(rec.distance) and (best is None or rec.distance < best.distance):
            best = rec
            best_arrays = {k: v.copy() for k, v in model.state_arrays().items()}
        if progress and progress(epoch, rec):
            break
        if cfg.lr_fallback and epoch == 9 and lr != LR_FALLBACK:
            val = [r.metrics.loss[1] for r in records]
            if min(val) >= val[0]:
                return None
    meta = {
        "feature_kind": cfg.features,
        "seed": cfg.seed,
        "segment_policy": cfg.segment_policy,
        "segment_length": seg_len,
        "max_length": max_len,
        "eval_segments": cfg.eval_segments,
        "standardize": stats.to_dict() if stats is not None else None,
        "lr": lr,
        "selection_uses_test_split": True,
    }
    return model, records, metric_rows, best, best_arrays, meta, losses


def train(rows: list[ManifestRow], cfg: TrainConfig, out_dir=None, feats: list[F.FeatureMatrix] | None = None,
          cache_dir=None, dtype=np.float32, progress=None) -> TrainResult:
    """Train one model and record per-epoch split metrics.

    Model selection happens after the fact (minimum overall distance); no
    early stopping. If validation loss has not improved on epoch 1 by
    epoch 10, training restarts with the fallback learning rate.
    ``progress(epoch, record)`` is called after every epoch; a truthy return
    value ends the run after that epoch.
    """
    if feats is None:
        feats = load_features(rows, cfg.features, cache_dir)
    data = build_dataset(rows, feats, cfg.seed)
    stats = F.compute_stats([F.FeatureMatrix(f, cfg.features) for f in data.feats["train"]], cfg.standardize)
    if stats is not None:
        for split in data.feats:
            data.feats[split] = [F.standardize(F.FeatureMatrix(f, cfg.features), cfg.standardize, stats).data
                                 for f in data.feats[split]]
    lr, restarted = cfg.lr, False
    out = _run(cfg, data, stats, lr, dtype, progress)
    if out is None:
        log.info("validation loss stalled in the first 10 epochs; restarting with lr=%g", LR_FALLBACK)
        lr, restarted = LR_FALLBACK, True
        out = _run(cfg, data, stats, lr, dtype, progress)
    model, records, metric_rows, best, best_arrays, meta, losses = out
    if best is None:
        raise TrainingError("no epoch produced a defined distance (constant predictions?)")
    meta["epoch"] = best.epoch
    result = TrainResult(cfg, records, metric_rows, best, model, best_arrays, meta, lr, restarted, losses)
    if out_dir is not None:
        write_run(result, out_dir)
    return result


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_run(result: TrainResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for row in result.metric_rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    write_selection_report(out / "selection.csv", result.records)
    save_checkpoint(out / "last.ckpt", result.model, dict(result.metadata, epoch=result.records[-1].epoch))
    best_model = type(result.model)(result.model.spec, seed=0, dtype=result.model.dtype)
    best_model.load_arrays(result.best_arrays)
    save_checkpoint(out / "best.ckpt", best_model, result.metadata)
    info = {"config": asdict(result.config), "lr_used": result.lr_used, "restarted": result.restarted,
            "best_epoch": result.best.epoch, "best_D": result.best.distance,
            "note": "test-split metrics informed the choice of best epoch"}
    (out / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def sweep(rows, cfg: TrainConfig, seeds, out_dir, feats=None, cache_dir=None, workers: int = 1) -> list[SelectionRecord]:
    """Train one run per seed; write ``seed_XXX/`` run dirs and ``summary.csv`` of best rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if feats is None:
        feats = load_features(rows, cfg.features, cache_dir)
    jobs = [(rows, replace(cfg, seed=s), out / f"seed_{s:03d}", feats) for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            bests = list(pool.map(_sweep_job, jobs))
    else:
        bests = [_sweep_job(j) for j in jobs]
    write_selection_report(out / "summary.csv", bests)
    return bests


def _sweep_job(job):
    rows, cfg, run_dir, feats = job
    return train(rows, cfg, out_dir=run_dir, feats=feats).best


# -- inference -------------------------------------------------------------------------------


def predict(checkpoint, source, dtype=np.float32) -> float:
    """OMOS on [1, 5] for a WAV path or a raw :class:`FeatureMatrix`."""
    ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    kind = ckpt.feature_kind
    if isinstance(source, F.FeatureMatrix):
        if source.kind != kind:
            raise TrainingError(f"features are {source.kind!r} but the checkpoint expects {kind!r}")
        feat = source
    else:
        feat = F.extract(load_clip(source), kind)
    stats = ckpt.metadata.get("standardize")
    if stats:
        st = F.StandardizeStats.from_dict(stats)
        feat = F.standardize(feat, st.mode, st)
    model = ckpt.build()
    scorer = Scorer(model, ckpt.metadata.get("segment_policy", "full"), ckpt.metadata.get("segment_length"),
                    ckpt.metadata.get("max_length"), ckpt.metadata.get("eval_segments", EVAL_SEGMENTS))
    if feat.feature_dim != getattr(model.spec, "input_dim", getattr(model.spec, "in_height", None)):
        raise TrainingError(f"feature dim {feat.feature_dim} does not match the model")
    return rescale_omos(scorer.score([feat.data])[0])
