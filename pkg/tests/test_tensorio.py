import numpy as np
import pytest

from semcorr import tensorio
from semcorr.errors import BadMagic, DimMismatch, InvariantViolation, MissingFile, Truncated
from semcorr.tensorio import (
    AnnotatedSample,
    Keypoint,
    coord_to_grid,
    grid_to_coord,
    read_tensor,
    write_tensor,
)


def test_row_major_layout(tmp_path):
    p = tmp_path / "t.bin"
    write_tensor(p, np.array([[1.0, 2.0], [3.0, 4.0]]))
    t = read_tensor(p)
    assert t.shape == (2, 2)
    assert t[0, 0] == 1.0 and t[0, 1] == 2.0 and t[1, 0] == 3.0 and t[1, 1] == 4.0


def test_bad_magic(tmp_path):
    p = tmp_path / "t.bin"
    write_tensor(p, np.zeros((2, 2)))
    raw = bytearray(p.read_bytes())
    raw[:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(BadMagic):
        read_tensor(p)


def test_truncated(tmp_path):
    p = tmp_path / "t.bin"
    write_tensor(p, np.zeros((3, 3)))
    raw = p.read_bytes()
    p.write_bytes(raw[:-5])
    with pytest.raises(Truncated):
        read_tensor(p)


def test_extra_payload_rejected(tmp_path):
    p = tmp_path / "t.bin"
    write_tensor(p, np.zeros(4))
    p.write_bytes(p.read_bytes() + b"\x00\x00\x00\x00")
    with pytest.raises(DimMismatch):
        read_tensor(p)


def test_missing_file(tmp_path):
    with pytest.raises(MissingFile):
        read_tensor(tmp_path / "nope.bin")


def test_roundtrip_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    p1 = tmp_path / "a.bin"
    p2 = tmp_path / "b.bin"
    write_tensor(p1, rng.normal(size=(3, 4, 5)).astype(np.float32))
    write_tensor(p2, read_tensor(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_grid_mapping_identity_resolution():
    # same resolution: nearest-pixel mapping rounds to integer coordinates
    assert coord_to_grid(3.4, 10, 10) == 3
    assert coord_to_grid(3.6, 10, 10) == 4
    assert coord_to_grid(-2.0, 10, 10) == 0
    assert coord_to_grid(99.0, 10, 10) == 9


def test_grid_mapping_roundtrip():
    # a grid cell center maps back to its own index
    for g, n in [(8, 64), (32, 128), (10, 10)]:
        idx = np.arange(g)
        coords = grid_to_coord(idx, g, n)
        assert np.all(coord_to_grid(coords, g, n) == idx)


def _sample(**overrides):
    kw = dict(
        image_id="s0",
        image_size=(16, 16),
        keypoints=[Keypoint(0, 5.0, 5.0, True), Keypoint(1, 2.0, 3.0, False)],
        depth=np.ones((16, 16)),
        features=np.tile(np.eye(4)[0], (8, 8, 1)),
        mask=None,
        bbox=(0.0, 0.0, 16.0, 16.0),
    )
    kw.update(overrides)
    return AnnotatedSample(**kw)


def test_keypoint_out_of_bounds():
    bad = _sample(keypoints=[Keypoint(0, -5.0, 10.0, True)])
    with pytest.raises(InvariantViolation):
        bad.validate()


def test_invisible_keypoint_may_be_outside():
    _sample(keypoints=[Keypoint(0, -5.0, 10.0, False)]).validate()


def test_zero_feature_rejected():
    feats = np.tile(np.eye(4)[0], (8, 8, 1))
    feats[3, 3] = 0.0
    with pytest.raises(InvariantViolation):
        _sample(features=feats).validate()


def test_nonunit_feature_renormalized_with_warning():
    feats = np.tile(2.0 * np.eye(4)[0], (8, 8, 1))
    s = _sample(features=feats)
    with pytest.warns(UserWarning):
        s.validate()
    assert np.allclose(np.linalg.norm(s.features, axis=-1), 1.0)


def test_nonpositive_depth_rejected():
    d = np.ones((16, 16))
    d[0, 0] = 0.0
    with pytest.raises(InvariantViolation):
        _sample(depth=d).validate()


def test_load_sample_keeps_all_visible_keypoints(tmp_path):
    from semcorr import synthgen

    manifest = synthgen.make_benchmark(
        n_train=2, n_test_pairs=0, seed=3, out_dir=tmp_path, n_test=0
    )
    for entry in manifest["train"]:
        sample = tensorio.load_sample(entry, tmp_path)
        assert sample.n_keypoints == len(entry["keypoints"])
        want = [k[0] for k in entry["keypoints"] if k[3]]
        assert sample.visible_indices() == want
