import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlolab import dataset as ds
from dlolab.errors import CorruptDataset, EmptyDataset, FormatError, IoError, WindowTooLong
from dlolab.quatchain import encode_positions, normalize_blocks
from dlolab.simulator import SimConfig, check_state, generate_dataset


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    cfg = SimConfig()
    trajs = generate_dataset(cfg, 10, 100)
    manifest = ds.split(ds.DatasetManifest(L=20, link_length=10.0, T=30, n_trajectories=10, base_seed=100,
                                           sim_config=cfg.to_dict()))
    path = tmp_path_factory.mktemp("data")
    ds.save_dataset(trajs, manifest, path)
    return cfg, trajs, manifest, path


def test_record_size(small):
    _, _, _, path = small
    assert ds.record_size(20, 30) == 16 + 4 * 31 * 20 * 3 + 12 * 30 == 7816
    assert (path / "traj_000000.bin").stat().st_size == 7816


def test_roundtrip_is_exact_f32(small):
    cfg, trajs, manifest, path = small
    m, back = ds.load_dataset(path)
    assert m == manifest
    for a, b in zip(trajs, back):
        assert ds.quantize(a).equals(b)
        # quantised states still satisfy the rest-state checks at twice the tolerance
        for s in b.states:
            assert check_state(s, cfg, tol_factor=2.0)["valid"]
    again = path.parent / "again"
    ds.save_dataset(back, m, again)
    assert (again / "traj_000003.bin").read_bytes() == (path / "traj_000003.bin").read_bytes()


def test_manifest_counts(small):
    _, _, manifest, _ = small
    assert manifest.n_transitions == 300
    assert manifest.n_states == 310
    full = ds.DatasetManifest(L=70, link_length=10.0, T=100, n_trajectories=10000, base_seed=0)
    assert full.n_transitions == 1_000_000


def test_bad_magic(small):
    _, _, manifest, path = small
    buf = bytearray((path / "traj_000000.bin").read_bytes())
    buf[:4] = b"XXXX"
    with pytest.raises(FormatError):
        ds.decode_record(bytes(buf), 0, manifest)


def test_truncated_record(small, tmp_path):
    _, trajs, manifest, path = small
    ds.save_dataset(trajs, manifest, tmp_path)
    f = tmp_path / "traj_000004.bin"
    f.write_bytes(f.read_bytes()[:-5])
    with pytest.raises(CorruptDataset):
        ds.load_dataset(tmp_path)


def test_record_manifest_mismatch(small):
    _, _, manifest, path = small
    other = ds.DatasetManifest(L=21, link_length=10.0, T=30, n_trajectories=10, base_seed=0)
    with pytest.raises(CorruptDataset):
        ds.decode_record((path / "traj_000000.bin").read_bytes(), 0, other)


def test_empty_directory(tmp_path):
    with pytest.raises(IoError):
        ds.load_dataset(tmp_path)


def test_unwritable_path(small, tmp_path):
    _, trajs, manifest, _ = small
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoError):
        ds.save_dataset(trajs, manifest, blocker / "sub")


def test_split_counts():
    m = ds.DatasetManifest(L=20, link_length=10.0, T=30, n_trajectories=10, base_seed=0)
    parts = ds.split(m).split
    assert [len(parts[k]) for k in ("train", "val", "test")] == [8, 1, 1]
    big = ds.split(ds.DatasetManifest(L=70, link_length=10.0, T=100, n_trajectories=10000, base_seed=0)).split
    assert [len(big[k]) for k in ("train", "val", "test")] == [8000, 1000, 1000]
    assert ds.split(m, seed=3).split == ds.split(m, seed=3).split


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500), st.integers(0, 2**31), st.floats(0, 0.5), st.floats(0, 0.5))
def test_split_partitions(n, seed, fv, ft):
    m = ds.DatasetManifest(L=3, link_length=1.0, T=1, n_trajectories=n, base_seed=0)
    parts = ds.split(m, (1 - fv - ft, fv, ft), seed).split
    all_idx = parts["train"] + parts["val"] + parts["test"]
    assert sorted(all_idx) == list(range(n))
    assert len(parts["val"]) == int(np.floor(n * fv + 1e-9))


def test_batch_shapes_and_cache(small):
    _, _, _, path = small
    data = ds.SequenceDataset.load(path)
    batch = data.sample_batch("train", 32, 20, np.random.default_rng(0))
    assert batch.states.shape == (32, 20, 79)
    assert batch.grasp.shape == (32, 19) and batch.displacement.shape == (32, 19, 2)
    assert batch.states.dtype == np.float32
    k, o = batch.index[5]
    np.testing.assert_array_equal(batch.states[5], encode_positions(data.trajectories[k].states[o:o + 20]).astype(np.float32))
    np.testing.assert_array_equal(batch.grasp[5], data.trajectories[k].grasp[o:o + 19])
    _, q, _ = normalize_blocks(batch.states[5, 0].astype(np.float64), 20)
    assert np.all(q[:, 0] >= 0)
    again = data.sample_batch("train", 32, 20, np.random.default_rng(0))
    assert np.array_equal(again.states, batch.states) and np.array_equal(again.index, batch.index)


def test_batch_shape_at_seventy_points():
    from dlolab.simulator import Trajectory

    rng = np.random.default_rng(0)
    d = rng.standard_normal((3, 31, 69, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    trajs = [Trajectory(np.concatenate([np.zeros((31, 1, 3)), 10 * d[k]], axis=1).cumsum(axis=1),
                        np.zeros(30, dtype=np.int64), np.zeros((30, 2)), k) for k in range(3)]
    m = ds.DatasetManifest(L=70, link_length=10.0, T=30, n_trajectories=3, base_seed=0,
                           split={"train": [0, 1, 2], "val": [], "test": []})
    data = ds.SequenceDataset(m, trajs)
    assert data.sample_batch("train", 32, 20, rng).states.shape == (32, 20, 279)


def test_full_window_starts_at_zero(small):
    _, _, _, path = small
    data = ds.SequenceDataset.load(path)
    batch = data.sample_batch("train", 8, 31, np.random.default_rng(1))
    assert np.all(batch.index[:, 1] == 0)
    with pytest.raises(WindowTooLong):
        data.sample_batch("train", 8, 32, np.random.default_rng(1))


def test_empty_split(small):
    _, _, manifest, path = small
    data = ds.SequenceDataset(ds.DatasetManifest(**{**manifest.__dict__, "split": {"train": [0]}}),
                              ds.load_dataset(path)[1])
    with pytest.raises(EmptyDataset):
        data.windows("val", 5)
