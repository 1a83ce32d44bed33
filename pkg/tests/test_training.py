import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from omoq import training as T
from omoq.features import FeatureMatrix
from omoq.metrics import read_selection_report
from omoq.models import RnnFtModel, RnnFtSpec, load_checkpoint, save_checkpoint


@pytest.fixture(scope="module")
def data20(synth20):
    rows = T.read_manifest(synth20)
    return rows, T.load_features(rows, "mfcc_d")


def _small(**kw):
    base = dict(model="bgru-ft", epochs=2, hidden=8, lr_fallback=False)
    base.update(kw)
    return T.TrainConfig(**base)


def test_scale_target_endpoints():
    assert [T.scale_target(v) for v in (1, 3, 5)] == [0.0, 0.5, 1.0]
    with pytest.raises(ValueError):
        T.scale_target(5.5)
    assert T.rescale_omos(0.5) == 3.0


@given(st.floats(0, 1))
def test_scale_round_trip(y):
    assert T.scale_target(T.rescale_omos(y)) == pytest.approx(y, abs=1e-12)


def test_eval_starts():
    assert T.eval_starts(40, 40) == [0] * 16
    assert T.eval_starts(55, 40) == list(range(16))
    assert T.eval_starts(70, 40) == [(i * 30) // 15 for i in range(16)]
    with pytest.raises(T.TrainingError):
        T.eval_starts(30, 40)


def test_segment_policies(rng):
    feat = np.arange(10.0)[:, None]
    tiled = T.make_segments(feat, "repeat_to_max", max_len=25)[0][:, 0]
    np.testing.assert_array_equal(tiled, list(range(10)) * 2 + list(range(5)))
    assert T.make_segments(feat, "full")[0] is feat
    seg = T.make_segments(feat, "truncate_random", 4, rng=rng)[0]
    assert seg.shape == (4, 1) and np.all(np.diff(seg[:, 0]) == 1)
    segs = T.make_segments(feat, "truncate_random", 10, train=False)
    assert len(segs) == 16 and all(np.array_equal(s, feat) for s in segs)


def test_manifest_round_trip_and_errors(tmp_path):
    (tmp_path / "a.wav").write_bytes(b"")
    rows = [T.ManifestRow(str(tmp_path / "a.wav"), 3.25, "M", "0.5", "Voice", "train")]
    T.write_manifest(tmp_path / "m.csv", rows, relative_to=tmp_path)
    assert "a.wav,3.25" in (tmp_path / "m.csv").read_text()
    assert T.read_manifest(tmp_path / "m.csv") == [T.ManifestRow(str((tmp_path / "a.wav").resolve()), 3.25, "M", "0.5", "Voice", "train")]
    with open(tmp_path / "bad.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(T.MANIFEST_FIELDS)
        w.writerow(["a.wav", "6", "M", "0.5", "Voice", "train"])
    with pytest.raises(T.TrainingError, match="outside"):
        T.read_manifest(tmp_path / "bad.csv")
    with open(tmp_path / "dup.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(T.MANIFEST_FIELDS)
        w.writerow(["a.wav", "3", "M", "0.5", "Voice", "train"])
        w.writerow(["./a.wav", "3", "M", "0.5", "Voice", "test"])
    with pytest.raises(T.TrainingError, match="duplicate"):
        T.read_manifest(tmp_path / "dup.csv")


def test_assign_validation_stratified():
    rows = [T.ManifestRow(f"/x/{i}", 3.0, "AB"[i % 2], "0.5", "Voice", "train") for i in range(40)]
    out = T.assign_validation(rows, seed=3)
    val = [r for r in out if r.split == "val"]
    assert len(val) == 4 and sum(r.method == "A" for r in val) == 2
    assert T.assign_validation(rows, seed=3) == out
    with_val = out[:1] + [T.ManifestRow("/y", 3.0, "A", "0.5", "Voice", "val")]
    assert T.assign_validation(with_val, seed=0) == with_val


def test_config_defaults():
    cnn = T.TrainConfig(model="cnn")
    assert (cnn.epochs, cnn.batch_size, cnn.segment_policy) == (100, 132, "truncate_random")
    rnn = T.TrainConfig(model="bgru-ff")
    assert (rnn.epochs, rnn.batch_size, rnn.segment_policy) == (30, 48, "full")
    assert T.TrainConfig(model="bgru-ff", features="mag").hidden == 512
    with pytest.raises(T.TrainingError):
        T.TrainConfig(model="cnn", segment_policy="full")
    with pytest.raises(T.TrainingError):
        T.TrainConfig(model="transformer")


def test_zero_lr_leaves_model_unchanged(data20):
    rows, feats = data20
    cfg = _small(epochs=3, lr=0.0, dropout=0.0)
    init = RnnFtModel(RnnFtSpec(input_dim=256, hidden=8), seed=cfg.seed, dtype=np.float32).state_arrays()
    res = T.train(rows, cfg, feats=feats)
    for k, v in res.model.state_arrays().items():
        np.testing.assert_array_equal(v, init[k])
    assert res.train_losses[0] == pytest.approx(res.train_losses[-1], rel=1e-6)
    losses = {tuple(r.metrics.loss) for r in res.records}
    assert len(losses) == 1


def test_lr_fallback_restarts(data20):
    rows, feats = data20
    res = T.train(rows, _small(epochs=10, lr=0.0, lr_fallback=True), feats=feats)
    assert res.restarted and res.lr_used == T.LR_FALLBACK


def test_same_seed_deterministic(data20, tmp_path):
    rows, feats = data20
    T.train(rows, _small(seed=7), out_dir=tmp_path / "a", feats=feats)
    T.train(rows, _small(seed=7), out_dir=tmp_path / "b", feats=feats)
    T.train(rows, _small(seed=8), out_dir=tmp_path / "c", feats=feats)
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a != (tmp_path / "c" / "metrics.csv").read_bytes()
    for name in ("selection.csv", "best.ckpt", "last.ckpt", "run.json"):
        assert (tmp_path / "a" / name).exists()


def test_best_epoch_is_min_distance(data20, tmp_path):
    rows, feats = data20
    res = T.train(rows, _small(epochs=3), out_dir=tmp_path, feats=feats)
    recs = read_selection_report(tmp_path / "selection.csv")
    assert min(r.distance for r in recs) == pytest.approx(res.best.distance, rel=1e-12)
    assert load_checkpoint(tmp_path / "best.ckpt").metadata["epoch"] == res.best.epoch


def test_cnn_prediction_is_mean_of_segments(data20, tmp_path):
    rows, feats = data20
    cfg = T.TrainConfig(model="cnn", epochs=1, batch_size=16, lr_fallback=False)
    res = T.train(rows, cfg, out_dir=tmp_path, feats=feats)
    ckpt = load_checkpoint(tmp_path / "last.ckpt")
    model = ckpt.build()
    feat = feats[0]
    seg_len = ckpt.metadata["segment_length"]
    starts = T.eval_starts(feat.frame_count, seg_len)
    manual = np.mean(model.score_segments([feat.data[s : s + seg_len] for s in starts]))
    assert T.predict(ckpt, feat) == pytest.approx(T.rescale_omos(manual), rel=1e-6)
    assert res.model.spec.in_width == seg_len


def test_predict_constant_half(tmp_path, rng):
    m = RnnFtModel(RnnFtSpec(input_dim=256, hidden=4))
    m.zero_()
    save_checkpoint(tmp_path / "z.ckpt", m, {"feature_kind": "mfcc_d", "segment_policy": "full"})
    assert T.predict(tmp_path / "z.ckpt", FeatureMatrix(rng.standard_normal((9, 256)), "mfcc_d")) == pytest.approx(3.0)
    with pytest.raises(T.TrainingError, match="expects"):
        T.predict(tmp_path / "z.ckpt", FeatureMatrix(rng.standard_normal((9, 256)), "mfcc"))


def test_empty_split_rejected(data20):
    rows, feats = data20
    rows = [r if r.split != "test" else T.ManifestRow(r.path, r.smos, r.method, r.beta, r.cls, "train") for r in rows]
    with pytest.raises(T.TrainingError, match="empty test"):
        T.train(rows, _small(), feats=feats)


def test_sweep_summary(data20, tmp_path):
    rows, feats = data20
    bests = T.sweep(rows, _small(), [0, 1, 2], tmp_path, feats=feats)
    assert sorted(p.name for p in tmp_path.glob("seed_*")) == ["seed_000", "seed_001", "seed_002"]
    summary = read_selection_report(tmp_path / "summary.csv")
    assert len(summary) == 3
    per_run = [min(read_selection_report(d / "selection.csv"), key=lambda r: r.distance) for d in sorted(tmp_path.glob("seed_*"))]
    assert min(r.distance for r in summary) == pytest.approx(min(r.distance for r in per_run), rel=1e-12)
    assert [b.seed for b in bests] == [0, 1, 2]
