import collections
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from disqhnet import evalkit, phantom
from disqhnet.errors import FormatError, ShapeError
from disqhnet.phantom import PhantomSpec


def test_generation_is_deterministic_per_seed():
    a, b = phantom.generate(PhantomSpec(seed=3)), phantom.generate(PhantomSpec(seed=3))
    for k in ("x1", "x2", "y", "roi_mask"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))
    c = phantom.generate(PhantomSpec(seed=4))
    assert not np.array_equal(a.x1, c.x1)


def test_shapes_and_mask_labels():
    s = phantom.generate(PhantomSpec(shape=(12, 16, 8)))
    assert s.x1.shape == s.x2.shape == s.y.shape == (1, 12, 16, 8)
    assert s.roi_mask.shape == (12, 16, 8)
    assert set(np.unique(s.roi_mask)) <= {0, 1, 2, 3, 4}
    assert s.reference_mask.any()


@pytest.mark.parametrize("stage", evalkit.STAGES)
def test_each_stage_is_realised(stage):
    s = phantom.generate(PhantomSpec(stage=stage, seed=7, w_syn=2.0))
    stats = evalkit.roi_means(evalkit.suvr(s.y, s.reference_mask), s.roi_mask)
    assert evalkit.braak_stage(stats) == stage
    for roi, uplift in phantom.STAGE_UPLIFT.items():
        if evalkit.stage_rank(roi) <= evalkit.stage_rank(stage):
            assert stats[roi] == pytest.approx(uplift)


def test_cohort_stage_distribution():
    subs = phantom.cohort(10, PhantomSpec())
    counts = collections.Counter(s.stage_label for s in subs)
    assert counts == {"CN": 3, "I/II": 3, "III/IV": 2, "V/VI": 2}
    assert [s.subject_id for s in subs] == [f"sub-{i:03d}" for i in range(10)]


def test_latent_fields_are_orthogonal_and_standardised():
    f = phantom.generate(PhantomSpec(seed=1)).fields
    for a, b in (("S", "U1"), ("S", "U2"), ("U1", "U2")):
        assert abs((f[a] * f[b]).mean()) < 1e-10
    assert f["syn"].mean() == pytest.approx(0.0, abs=1e-12)
    assert f["syn"].std() == pytest.approx(1.0)


def test_target_follows_mixture_weights():
    base = dict(seed=2, noise_sigma=0.0, roi_hint=0.0)
    s = phantom.generate(PhantomSpec(w_red=0.0, w_syn=1.0, **base))
    outside = s.roi_mask == 0
    pred = phantom.BASELINE + phantom.FIELD_AMPLITUDE * np.tanh(s.fields["syn"])
    np.testing.assert_allclose(s.y[0][outside], pred[outside], atol=1e-12)


def test_spec_validation():
    with pytest.raises(ShapeError):
        PhantomSpec(shape=(2, 16, 16))
    with pytest.raises(ValueError):
        PhantomSpec(w_syn=-1.0)
    with pytest.raises(ValueError):
        PhantomSpec(stage="VII")


def test_identity_transform_is_exact():
    s = phantom.generate(PhantomSpec())
    t = phantom.apply_transform(s, phantom.Transform())
    np.testing.assert_array_equal(t.x1, s.x1)
    np.testing.assert_array_equal(t.roi_mask, s.roi_mask)


def test_flip_transform():
    s = phantom.generate(PhantomSpec())
    t = phantom.apply_transform(s, phantom.Transform(flips=(False, False, True)))
    np.testing.assert_array_equal(t.y[0], s.y[0][:, :, ::-1])


def test_augmentation_keeps_labels_discrete_and_is_seeded():
    s = phantom.generate(PhantomSpec())
    a = phantom.augment(s, np.random.default_rng(5))
    b = phantom.augment(s, np.random.default_rng(5))
    np.testing.assert_array_equal(a.x1, b.x1)
    assert set(np.unique(a.roi_mask)) <= set(np.unique(s.roi_mask))
    assert a.reference_mask.any() and a.x1.shape == s.x1.shape


# --- DVOL ---------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=2, max_size=4), st.integers(0, 2**31 - 1))
def test_dvol_round_trip(shape, seed):
    v = np.random.default_rng(seed).normal(size=shape).astype(np.float32)
    out = phantom.decode_volume(phantom.encode_volume(v))
    assert out.shape == v.shape
    np.testing.assert_array_equal(out, v)


def test_dvol_rejects_corruption():
    buf = phantom.encode_volume(np.ones((2, 3, 4), dtype=np.float32))
    with pytest.raises(FormatError):
        phantom.decode_volume(b"XXXXX\n" + buf[6:])
    with pytest.raises(FormatError):
        phantom.decode_volume(buf[:-1])
    with pytest.raises(FormatError):
        phantom.decode_volume(phantom.MAGIC + struct.pack("<I", 1) + struct.pack("<I", 0))


def test_dvol_files(tmp_path):
    v = np.arange(24, dtype=np.float32).reshape(1, 2, 3, 4)
    phantom.write_volume(v, tmp_path / "v.dvol")
    np.testing.assert_array_equal(phantom.read_volume(tmp_path / "v.dvol"), v)


def test_manifest_round_trip(tmp_path):
    subs = phantom.cohort(3, PhantomSpec())
    rows = [phantom.write_subject(s, tmp_path) for s in subs]
    phantom.write_manifest(rows, tmp_path / "manifest.tsv")
    back = phantom.load_manifest(tmp_path / "manifest.tsv")
    assert len(back) == 3
    for a, b in zip(subs, back):
        assert a.subject_id == b.subject_id and a.stage_label == b.stage_label
        np.testing.assert_array_equal(b.roi_mask, a.roi_mask)
        np.testing.assert_allclose(b.y, a.y, rtol=1e-6)
    (tmp_path / rows[0]["x1"]).unlink()
    with pytest.raises(FileNotFoundError):
        phantom.load_manifest(tmp_path / "manifest.tsv")


def test_manifest_requires_columns(tmp_path):
    (tmp_path / "m.tsv").write_text("subject_id\tx1\nsub\ta.dvol\n")
    with pytest.raises(FormatError):
        phantom.read_manifest(tmp_path / "m.tsv")
