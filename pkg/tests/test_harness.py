import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from avtrack import harness as hs
from avtrack.attention import AttentionModel, QueryNetConfig
from avtrack.frontend import MIN_SHIFT_STEPS, SyntheticTrackSpec
from avtrack.numeric import INF, make_rng

SPEC = SyntheticTrackSpec(visual_dim=16)


def _model(seed=0):
    m = AttentionModel(QueryNetConfig(channels=(240, 8, 8), kernel=3), visual_dim=16, seed=seed)
    m.params["bilinear/W"].value = np.random.default_rng(seed).uniform(-1, 1, m.W.shape)
    return m


def _dataset(N=4, count=30, seed=0, mode="independent", t_min=24, t_max=40):
    base = hs.make_base_pairs(SPEC, count, seed, t_min, t_max)
    return hs.build_multitrack(base, N, make_rng(seed, "multitrack", N), mode, seed)


# -- dataset construction ----------------------------------------------------


def test_base_pairs_lengths_in_range():
    base = hs.make_base_pairs(SPEC, 50, 3, 10, 12)
    assert len(base) == 50
    assert set(base.lengths.tolist()) <= {10, 11, 12}
    with pytest.raises(ValueError):
        hs.make_base_pairs(SPEC, 0, 0)
    with pytest.raises(ValueError):
        hs.make_base_pairs(SPEC, 5, 0, 8, 4)


def test_single_track_is_the_matched_one():
    ds = _dataset(N=1)
    for i in range(len(ds)):
        s = ds[i]
        assert s.truth_index == 0 and s.N == 1
        assert np.array_equal(s.tracks[0], ds.base.visual[i])


@pytest.mark.parametrize("mode", hs.MODES)
def test_no_distractor_copies_the_truth(mode):
    if mode == "independent":
        ds = _dataset(N=4, count=100)
    else:
        ds = _dataset(N=4, count=20, mode=mode, t_min=hs.min_shifted_length(4), t_max=90)
    assert hs.distractor_violations(ds) == []
    for i in range(len(ds)):
        s = ds[i]
        assert np.array_equal(s.tracks[s.truth_index], ds.base.visual[i])
        others = [k for k in range(4) if k != s.truth_index]
        assert len({int(ds.sources[i, k]) * 1000 + int(ds.offsets[i, k]) for k in others}) == 3


def test_time_shifted_tracks_are_rolls():
    ds = _dataset(N=2, count=5, mode="time-shifted", t_min=70, t_max=80)
    for i in range(len(ds)):
        k = 1 - int(ds.truth[i])
        shift = int(ds.offsets[i, k])
        assert MIN_SHIFT_STEPS <= shift <= ds.base.lengths[i] - MIN_SHIFT_STEPS
        assert np.array_equal(ds[i].tracks[k], np.roll(ds.base.visual[i], -shift, axis=0))


def test_build_validation():
    base = hs.make_base_pairs(SPEC, 3, 0)
    with pytest.raises(ValueError):
        hs.build_multitrack(base, 0, np.random.default_rng(0))
    with pytest.raises(ValueError, match="at least N"):
        hs.build_multitrack(base, 4, np.random.default_rng(0))
    with pytest.raises(ValueError, match="steps"):
        hs.build_multitrack(base, 2, np.random.default_rng(0), mode="time-shifted")
    assert hs.min_shifted_length(2) == 2 * MIN_SHIFT_STEPS
    tight = hs.make_base_pairs(SPEC, 3, 0, hs.min_shifted_length(8), hs.min_shifted_length(8))
    hs.build_multitrack(tight, 8, np.random.default_rng(0), mode="time-shifted")
    short = hs.make_base_pairs(SPEC, 3, 0, hs.min_shifted_length(8) - 1, hs.min_shifted_length(8) - 1)
    with pytest.raises(ValueError, match="N=8"):
        hs.build_multitrack(short, 8, np.random.default_rng(0), mode="time-shifted")
    with pytest.raises(ValueError):
        hs.build_multitrack(base, 2, np.random.default_rng(0), mode="mirror")


def test_truth_slot_roughly_uniform():
    ds = _dataset(N=4, count=400)
    counts = np.bincount(ds.truth, minlength=4)
    assert counts.min() > 70


def test_dataset_determinism_and_round_trip(tmp_path):
    a, b = _dataset(seed=5), _dataset(seed=5)
    assert a.checksum == b.checksum
    assert a.checksum != _dataset(seed=6).checksum
    a.save(tmp_path / "ds", {"n": 4})
    back = hs.MultiTrackDataset.load(tmp_path / "ds")
    assert back.checksum == a.checksum
    assert all(np.array_equal(x.tracks, y.tracks) for x, y in zip(a.samples, back.samples))


def test_tampered_dataset_is_rejected(tmp_path):
    ds = _dataset(count=8)
    ds.save(tmp_path)
    ds.truth[0] = (ds.truth[0] + 1) % ds.N
    ds2 = hs.MultiTrackDataset(ds.base, ds.N, ds.seed, ds.sources, ds.offsets, ds.truth, ds.mode)
    ds2.save(tmp_path / "other")
    import json
    m1 = json.loads((tmp_path / "manifest.json").read_text())
    m2 = json.loads((tmp_path / "other" / "manifest.json").read_text())
    m2["dataset_checksum"] = m1["dataset_checksum"]
    (tmp_path / "other" / "manifest.json").write_text(json.dumps(m2))
    with pytest.raises(ValueError):
        hs.MultiTrackDataset.load(tmp_path / "other")


def test_sample_validation():
    with pytest.raises(ValueError):
        hs.MultiTrackSample(np.zeros((3, 240)), np.zeros((2, 3, 4)), 2)
    with pytest.raises(ValueError):
        hs.MultiTrackSample(np.zeros((3, 240)), np.zeros((2, 4, 4)), 0)


# -- evaluation ---------------------------------------------------------------


def test_majority_vote():
    assert hs.majority_vote([2, 2, 1, 1, 0], 3) == 1
    assert hs.majority_vote([3, 3, 3, 0], 4) == 3


@pytest.mark.parametrize("N", [2, 4, 8])
def test_identical_tracks_give_ln_n_entropy(N):
    base = hs.make_base_pairs(SPEC, 3, 1)
    m = _model()
    for i in range(3):
        tracks = np.repeat(base.visual[i][None], N, axis=0)
        S = hs.sample_scores(m, hs.MultiTrackSample(base.acoustic[i], tracks, 0))
        rep = hs.report_from_scores([S], [0], N, 1.0)
        assert abs(rep.mean_entropy - math.log(N)) < 1e-12
        assert abs(rep.mean_ce - math.log(N)) < 1e-12


def test_single_track_evaluation_is_perfect():
    rep = hs.evaluate_selection(_model(), _dataset(N=1, count=10))
    assert rep.frame_accuracy == 1.0 and rep.utterance_accuracy == 1.0
    assert rep.mean_entropy == 0.0 and rep.mean_ce == 0.0


def test_infinite_beta_matches_loop_oracle():
    ds = _dataset(N=4, count=25)
    m = _model(3)
    curve = hs.sweep_beta(m, ds, [0.0, 1.0, INF])
    scores = [s.tolist() for s in hs.dataset_scores(m, ds)]
    ref = hs.hard_argmax_report(scores, ds.truth, 4)
    got = curve[-1][1]
    assert got.frame_correct == ref.frame_correct
    assert got.utterance_correct == ref.utterance_correct
    assert got.ce == ref.ce and got.entropy == ref.entropy
    picks = [[oracles.hard_argmax(row) for row in s] for s in scores]
    assert ref.frame_correct == [sum(p == t for p in ps) for ps, t in zip(picks, ds.truth)]
    # beta 0 is uniform
    assert abs(curve[0][1].mean_entropy - math.log(4)) < 1e-12
    # frame accuracy depends on the argmax only, so it is the same for all beta > 0
    assert curve[1][1].frame_accuracy == got.frame_accuracy


def test_sweep_rejects_negative_beta():
    with pytest.raises(ValueError):
        hs.sweep_beta(_model(), _dataset(count=5), [1.0, -0.5])


def test_summary_renders_inf():
    rep = hs.hard_argmax_report([[[1.0, 0.0]]], [0], 2)
    assert rep.summary()["beta"] == "inf"
    assert rep.summary()["frame_accuracy"] == 1.0


# -- output files -------------------------------------------------------------


def test_report_csv(tmp_path):
    ds = _dataset(count=6)
    rep = hs.evaluate_selection(_model(), ds)
    hs.write_report_csv(tmp_path / "r.csv", rep, ds.truth, header={"k": 1})
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == '# {"k": 1}' and lines[1] == ",".join(hs.REPORT_COLUMNS)
    assert len(lines) == 8
    acc = [float(line.split(",")[3]) for line in lines[2:]]
    assert acc == rep.sample_frame_accuracy


def test_curve_csv(tmp_path):
    curve = hs.sweep_beta(_model(), _dataset(count=5), [0, 0.5, 1, 2, INF])
    hs.write_curve_csv(tmp_path / "c.csv", curve)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert len(lines) == 6 and lines[-1].startswith("inf,")


def test_pgm_examples():
    assert hs.pgm_pixels(np.full((1, 4), 0.25)).tolist() == [[oracles.UNIFORM4_PIXEL] * 4]
    assert hs.pgm_pixels(np.array([[0.0, 1.0, 0.5]])).tolist() == [[0, 255, 128]]
    with pytest.raises(ValueError):
        hs.pgm_pixels(np.array([[1.5]]))


@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2 ** 16))
def test_pgm_round_trip(T, N, seed):
    alpha = np.random.default_rng(seed).dirichlet(np.ones(N), size=T)
    data = hs.encode_pgm(alpha, comment='{"a": 1}\nsecond')
    assert data.startswith(b"P5\n# ")
    assert np.array_equal(hs.decode_pgm(data), hs.pgm_pixels(alpha))


def test_export_attention(tmp_path):
    ds = _dataset(count=5)
    alpha = hs.export_attention(_model(), ds[2], tmp_path / "att", header={"beta": 1.0})
    rows = (tmp_path / "att.csv").read_text().splitlines()
    assert rows[0].startswith("# ") and '"truth_index"' in rows[0]
    assert rows[1] == "t,track0,track1,track2,track3"
    for line in rows[2:]:
        vals = [float(x) for x in line.split(",")[1:]]
        assert abs(math.fsum(vals) - 1.0) < 1e-12
    pix = hs.decode_pgm((tmp_path / "att.pgm").read_bytes())
    assert pix.shape == alpha.shape == (ds[2].T, 4)


def test_unwritable_path_reports_the_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        hs.write_attention(np.full((2, 2), 0.5), blocker / "sub" / "att")
