import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurovol import data as D
from neurovol.data import DataError, SubjectRecord, SynthConfig
from neurovol.tensor_core import flip_lr


def write_nifti(path, vol_zyx, datatype=16, slope=0.0, inter=0.0, magic=b"n+1\x00", endian="<"):
    """Minimal single-file NIfTI-1 writer used as a test fixture."""
    nz, ny, nx = vol_zyx.shape
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)
    struct.pack_into(endian + "8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    bitpix = {4: 16, 16: 32}.get(datatype, 8)
    struct.pack_into(endian + "hh", hdr, 70, datatype, bitpix)
    struct.pack_into(endian + "f", hdr, 108, 352.0)
    struct.pack_into(endian + "2f", hdr, 112, slope, inter)
    hdr[344:348] = magic
    code = {4: "i2", 16: "f4"}.get(datatype, "u1")
    body = np.ascontiguousarray(vol_zyx, dtype=endian + code).tobytes()
    path.write_bytes(bytes(hdr) + b"\0\0\0\0" + body)


# ---- VOL1 --------------------------------------------------------------------


def test_vol_roundtrip_bit_exact(tmp_path):
    v = np.random.default_rng(0).standard_normal((5, 4, 3)).astype(np.float32)
    D.write_volume(tmp_path / "a.vol", v)
    raw = (tmp_path / "a.vol").read_bytes()
    assert raw[:4] == b"VOL1" and struct.unpack("<3I", raw[4:16]) == (5, 4, 3)
    assert len(raw) == 16 + 4 * 60
    back = D.read_volume(tmp_path / "a.vol")
    assert back.dtype == np.float32 and back.tobytes() == v.tobytes()


@settings(max_examples=20, deadline=None)
@given(st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)), st.integers(0, 2**31))
def test_vol_roundtrip_property(tmp_path_factory, dims, seed):
    path = tmp_path_factory.mktemp("vol") / "v.vol"
    v = (np.random.default_rng(seed).standard_normal(dims) * 1e3).astype(np.float32)
    D.write_volume(path, v)
    assert D.read_volume(path).tobytes() == v.tobytes()


def test_vol_errors(tmp_path):
    p = tmp_path / "v.vol"
    D.write_volume(p, np.ones((2, 2, 2), np.float32))
    raw = p.read_bytes()
    p.write_bytes(raw[:-1])
    with pytest.raises(DataError, match="truncated"):
        D.read_volume(p)
    p.write_bytes(b"VOL2" + raw[4:])
    with pytest.raises(DataError, match="magic"):
        D.read_volume(p)
    p.write_bytes(struct.pack("<4sIII", b"VOL1", 0, 2, 2))
    with pytest.raises(DataError, match="zero"):
        D.read_volume(p)
    p.write_bytes(struct.pack("<4sIII", b"VOL1", 2**31 - 1, 2**31 - 1, 7))
    with pytest.raises(DataError, match="overflow"):
        D.read_volume(p)
    p.write_bytes(b"VO")
    with pytest.raises(DataError):
        D.read_volume(p)
    with pytest.raises(DataError):
        D.write_volume(p, np.ones((2, 2)))


# ---- NIfTI ---------------------------------------------------------------------


@pytest.mark.parametrize("datatype", [4, 16])
@pytest.mark.parametrize("endian", ["<", ">"])
def test_nifti_import_values(tmp_path, datatype, endian):
    vol = np.arange(2 * 3 * 4).reshape(2, 3, 4) - 7
    write_nifti(tmp_path / "s.nii", vol, datatype=datatype, endian=endian)
    out = D.import_nifti(tmp_path / "s.nii")
    assert out.dtype == np.float32 and out.shape == (2, 3, 4)
    assert np.array_equal(out, vol.astype(np.float32))


def test_nifti_applies_scaling(tmp_path):
    vol = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
    write_nifti(tmp_path / "s.nii", vol, datatype=4, slope=0.5, inter=10.0)
    assert np.array_equal(D.import_nifti(tmp_path / "s.nii"), vol * 0.5 + 10)


def test_nifti_errors(tmp_path):
    vol = np.zeros((2, 2, 2))
    write_nifti(tmp_path / "u8.nii", vol, datatype=2)
    with pytest.raises(DataError, match="datatype"):
        D.import_nifti(tmp_path / "u8.nii")
    write_nifti(tmp_path / "pair.nii", vol, magic=b"ni1\x00")
    with pytest.raises(DataError, match="magic"):
        D.import_nifti(tmp_path / "pair.nii")
    (tmp_path / "gz.nii").write_bytes(b"\x1f\x8b" + bytes(400))
    with pytest.raises(DataError, match="compressed"):
        D.import_nifti(tmp_path / "gz.nii")
    write_nifti(tmp_path / "cut.nii", vol)
    (tmp_path / "cut.nii").write_bytes((tmp_path / "cut.nii").read_bytes()[:-3])
    with pytest.raises(DataError, match="truncated"):
        D.import_nifti(tmp_path / "cut.nii")


# ---- resize / normalize ---------------------------------------------------------


def test_resize_identity_and_constant():
    v = np.random.default_rng(1).standard_normal((4, 5, 6)).astype(np.float32)
    assert D.resize_volume(v, (4, 5, 6)).tobytes() == v.tobytes()
    c = np.full((3, 4, 5), 2.5)
    assert np.allclose(D.resize_volume(c, (7, 2, 9)), 2.5)


@settings(max_examples=25, deadline=None)
@given(
    st.tuples(st.integers(2, 7), st.integers(2, 7), st.integers(2, 7)),
    st.tuples(st.integers(2, 9), st.integers(2, 9), st.integers(2, 9)),
    st.tuples(*[st.floats(-3, 3)] * 4),
)
def test_resize_preserves_linear_ramp(src, dst, coef):
    a, b, c, d = coef
    # corner-aligned: a ramp in normalized coordinates is reproduced exactly
    grid = lambda dims: np.meshgrid(*[np.linspace(0, 1, n) for n in dims], indexing="ij")
    z, y, x = grid(src)
    out = D.resize_volume(a * z + b * y + c * x + d, dst)
    z, y, x = grid(dst)
    assert np.max(np.abs(out - (a * z + b * y + c * x + d))) < 1e-5


def test_resize_rejects_degenerate():
    with pytest.raises(DataError):
        D.resize_volume(np.ones((1, 4, 4)), (4, 4, 4))
    with pytest.raises(DataError):
        D.resize_volume(np.ones((4, 4, 4)), (4, 1, 4))


def test_normalize_intensity():
    v = np.random.default_rng(2).standard_normal((6, 6, 6)) * 3 + 7
    n = D.normalize_intensity(v)
    assert abs(n.mean()) < 1e-5 and abs(n.std() - 1) < 1e-5
    assert not D.normalize_intensity(np.full((3, 3, 3), 4.0)).any()
    assert np.allclose(D.normalize_intensity(v * 2.5 - 1), n, atol=1e-6)


# ---- records, manifests, datasets ------------------------------------------------


def _records(n, label="NC"):
    return [SubjectRecord(f"s{i:02d}", f"s{i:02d}.vol", label, 60 + i % 40, "MF"[i % 2]) for i in range(n)]


@pytest.mark.parametrize("kw", [dict(label="XX"), dict(age_years=0), dict(age_years=130), dict(sex="U")])
def test_record_validation(kw):
    base = dict(id="a", path="a.vol", label="AD", age_years=70.0, sex="M")
    with pytest.raises(DataError):
        SubjectRecord(**{**base, **kw})


def test_manifest_roundtrip(tmp_path):
    recs = _records(4) + [SubjectRecord("x", "x.vol", "MCI", 71.3, "F")]
    D.write_manifest(tmp_path / "m.csv", recs)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "id,path,label,age_years,sex"
    assert D.read_manifest(tmp_path / "m.csv") == recs


def test_manifest_errors(tmp_path):
    (tmp_path / "bad.csv").write_text("id,label\na,NC\n")
    with pytest.raises(DataError, match="header"):
        D.read_manifest(tmp_path / "bad.csv")
    D.write_manifest(tmp_path / "dup.csv", _records(2) + _records(1))
    with pytest.raises(DataError, match="duplicate"):
        D.read_manifest(tmp_path / "dup.csv")


def test_dataset_load_resizes_and_normalizes(tmp_path):
    recs = _records(3)
    rng = np.random.default_rng(3)
    for r in recs:
        D.write_volume(tmp_path / r.path, rng.standard_normal((4, 5, 6)).astype(np.float32))
    D.write_manifest(tmp_path / "m.csv", recs)
    ds = D.Dataset.load(tmp_path / "m.csv", target_dims=(6, 6, 6))
    vols, demos, labels = ds.batch(ds.ids)
    assert vols.shape == (3, 1, 6, 6, 6) and demos.shape == (3, 2)
    assert labels.tolist() == [0, 0, 0]
    assert np.allclose(vols.mean(axis=(1, 2, 3, 4)), 0, atol=1e-5)


def test_augment_flip():
    recs = _records(3)
    vols = {r.id: np.random.default_rng(i).standard_normal((2, 3, 4)).astype(np.float32) for i, r in enumerate(recs)}
    ds = D.Dataset(recs, vols)
    aug = D.augment_flip(ds)
    assert len(aug) == 2 * len(ds)
    for r in recs:
        f = aug.by_id[r.id + "~flip"]
        assert np.array_equal(aug.volumes[f.id], flip_lr(vols[r.id]))
        assert (f.label, f.age_years, f.sex) == (r.label, r.age_years, r.sex)
        assert D.base_id(f.id) == r.id
    assert len(ds) == 3  # original untouched
    with pytest.raises(DataError):
        D.augment_flip(aug)


# ---- folds ---------------------------------------------------------------------


def test_folds_ten_subjects():
    plan = D.make_folds(_records(10), k=10, seed=0)
    for f in plan.folds:
        assert (len(f.train_ids), len(f.val_ids), len(f.test_ids)) == (8, 1, 1)
        assert f.val_ids == plan.folds[(f.index + 1) % 10].test_ids


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 12), st.integers(0, 60), st.integers(0, 1000))
def test_folds_partition_property(k, extra, seed):
    recs = _records(k + extra)
    plan = D.make_folds(recs, k=k, seed=seed)
    every = {r.id for r in recs}
    tests = []
    for f in plan.folds:
        parts = [set(f.train_ids), set(f.val_ids), set(f.test_ids)]
        assert set.union(*parts) == every and sum(map(len, parts)) == len(every)
        n = len(every)
        assert abs(len(f.test_ids) - n / k) <= 1 and abs(len(f.val_ids) - n / k) <= 1
        tests += f.test_ids
    assert sorted(tests) == sorted(every)
    assert D.make_folds(recs, k=k, seed=seed) == plan


def test_folds_errors_and_serialization(tmp_path):
    with pytest.raises(DataError):
        D.make_folds(_records(5), k=10)
    plan = D.make_folds(_records(20), k=5, seed=3)
    plan.save(tmp_path / "split.json")
    assert D.SplitPlan.load(tmp_path / "split.json") == plan
    assert D.make_folds(_records(20), k=5, seed=4) != plan


# ---- synthetic generator ---------------------------------------------------------------


def test_synth_signal_off_gives_identical_classes():
    cfg = SynthConfig(dims=(12, 12, 12), lesion_radius=3, lesion_delta=0, noise_sigma=0, counts={"NC": 1, "AD": 1, "MCI": 1})
    vols, recs = D.synth_generate(cfg)
    a, b, c = (vols[r.id] for r in recs)
    assert np.array_equal(a, b) and np.array_equal(b, c)


@pytest.mark.parametrize("profile", ["smooth", "flat"])
def test_synth_lesion_ordering(profile):
    cfg = SynthConfig(dims=(16, 16, 16), lesion_radius=4, lesion_profile=profile, noise_sigma=0, counts={"NC": 1, "AD": 1, "MCI": 1})
    vols, recs = D.synth_generate(cfg)
    mask = D.lesion_mask(cfg)
    means = {r.label: vols[r.id][mask].mean() for r in recs}
    assert means["NC"] > means["MCI"] > means["AD"]
    # outside the sphere all classes agree
    outside = [vols[r.id][~mask] for r in recs]
    assert np.array_equal(outside[0], outside[1]) and np.array_equal(outside[1], outside[2])


def test_synth_deterministic_and_demographics():
    cfg = SynthConfig(dims=(12, 12, 12), lesion_radius=3, counts={"NC": 30, "AD": 30}, seed=9)
    v1, r1 = D.synth_generate(cfg)
    v2, r2 = D.synth_generate(SynthConfig.from_dict(cfg.to_dict()))
    assert r1 == r2 and all(v1[k].tobytes() == v2[k].tobytes() for k in v1)
    assert [r.id for r in r1] == [f"sub-{i:04d}" for i in range(60)]
    assert all(55 <= r.age_years <= 90 for r in r1)
    assert {r.sex for r in r1} == {"M", "F"}
    other, _ = D.synth_generate(SynthConfig(**{**cfg.to_dict(), "seed": 10}))
    assert not np.array_equal(other["sub-0000"], v1["sub-0000"])


def test_synth_config_validation():
    with pytest.raises(DataError):
        SynthConfig(dims=(10, 10, 10), lesion_radius=6).validate()
    with pytest.raises(DataError):
        SynthConfig(noise_sigma=-1).validate()
    with pytest.raises(DataError):
        SynthConfig(counts={"XX": 3}).validate()
    with pytest.raises(DataError):
        SynthConfig.from_dict({"radius": 3})
    # default lesion sits off-centre
    assert SynthConfig().lesion_center == (12.8, 12.8, 12.8)


def test_lesion_weights_profile():
    cfg = SynthConfig(dims=(16, 16, 16), lesion_center=(8, 8, 8), lesion_radius=4)
    w = D.lesion_weights(cfg)
    assert w[8, 8, 8] == 1.0 and w[8, 8, 12] == 0.0 and w[8, 8, 10] == pytest.approx(0.75**2)
    assert not w[~D.lesion_mask(cfg)].any()
