from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlolab import dataset as ds
from dlolab import rollout as ro
from dlolab.autodiff import Tensor
from dlolab.errors import EmptyDataset, ProtocolError, ShapeError
from dlolab.quatchain import encode_positions
from dlolab.rssm import Hyperparams, RSSM
from dlolab.simulator import SimConfig, generate_dataset

HP = Hyperparams(d_embed=16, d_action=16, d_rnn=16, d_z=4, d_hidden=16, link_embed_dim=4, position_scale=0.01)


@pytest.fixture(scope="module")
def data():
    cfg = SimConfig(L=8, horizon=30)
    trajs = [ds.quantize(t) for t in generate_dataset(cfg, 20, 0)]
    m = ds.split(ds.DatasetManifest(L=8, link_length=10.0, T=30, n_trajectories=20, base_seed=0))
    return ds.SequenceDataset(m, trajs)


@pytest.fixture(scope="module")
def model():
    return RSSM(HP, 8, 10.0, seed=0)


def test_rmse_basics():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 10, (6, 3))
    assert ro.rmse(a, a) == 0.0
    assert ro.rmse(a + [3.0, 4.0, 0.0], a) == pytest.approx(5.0, abs=1e-12)
    with pytest.raises(ShapeError):
        ro.rmse(a, a[:5])


def test_rmse_against_decimal_recompute():
    getcontext().prec = 50
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.normal(0, 50, (2, 20, 3))
        total = sum(sum((Decimal(float(x)) - Decimal(float(y))) ** 2 for x, y in zip(p, q)) for p, q in zip(a, b))
        exact = float((total / Decimal(20)).sqrt())
        assert abs(float(ro.rmse(a, b)) - exact) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rmse_symmetric_and_translation_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(0, 30, (2, 10, 3))
    shift = rng.uniform(-100, 100, 3)
    assert ro.rmse(a, b) == ro.rmse(b, a)
    assert ro.rmse(a + shift, b + shift) == pytest.approx(ro.rmse(a, b), rel=1e-9, abs=1e-9)


def test_warmup_single_state_is_posterior_of_first(data, model):
    s = encode_positions(data.trajectories[0].states[:1])
    latent = ro.warmup(model, s, np.zeros((0,), dtype=int), np.zeros((0, 2)))
    h0 = model.initial_state(1).h
    _, z = model.posterior(h0, model.encode_state(Tensor(model.to_model_space(s))))
    np.testing.assert_array_equal(latent.z.data, z.data)
    np.testing.assert_array_equal(latent.h.data, 0)


def test_warmup_protocol_errors(data, model):
    s = encode_positions(data.trajectories[0].states[:5])
    t = data.trajectories[0]
    with pytest.raises(ProtocolError):
        ro.warmup(model, s, t.grasp[:3], t.displacement[:3])
    latent = ro.warmup(model, s, t.grasp[:4], t.displacement[:4])
    with pytest.raises(ProtocolError):
        ro.open_loop(model, latent, t.grasp[None, 4:7], t.displacement[None, 4:7], 4)
    with pytest.raises(ProtocolError):
        ro.open_loop(model, latent, t.grasp[None, 4:4], t.displacement[None, 4:4], 0)


def test_warmup_deterministic(data, model):
    t = data.trajectories[1]
    s = encode_positions(t.states[:5])
    a = ro.warmup(model, s, t.grasp[:4], t.displacement[:4])
    b = ro.warmup(model, s, t.grasp[:4], t.displacement[:4])
    assert np.array_equal(a.h.data, b.h.data) and np.array_equal(a.z.data, b.z.data)


def test_single_step_is_one_prediction_decode(data, model):
    t = data.trajectories[2]
    latent = ro.warmup(model, encode_positions(t.states[:5]), t.grasp[:4], t.displacement[:4])
    pred = ro.open_loop(model, latent, t.grasp[None, 4:5], t.displacement[None, 4:5], 1)
    h = model.recurrent_step(latent, model.encode_action(t.grasp[4:5], t.displacement[4:5]))
    _, z = model.prior(h)
    from dlolab.quatchain import decode_vectors

    direct = decode_vectors(model.from_model_space(model.decode_pred(h, z).data), 8, 10.0)
    assert pred.shape == (1, 1, 8, 3)
    np.testing.assert_array_equal(pred[:, 0], direct)


def test_model_rollouts_have_exact_links_and_repeat(data, model):
    win, pred = ro.run_rollouts(ro.ModelPredictor(model), data, 30, 5, 20, seed=3)
    assert pred.shape == (30, 20, 8, 3)
    assert ro.max_link_error(pred, 10.0) < 1e-9
    _, again = ro.run_rollouts(ro.ModelPredictor(model), data, 30, 5, 20, seed=3)
    assert pred.tobytes() == again.tobytes()


def test_oracle_stub_scores_zero(data):
    rep = ro.evaluate(ro.OraclePredictor(), data, 1, 5, 20, seed=0)
    np.testing.assert_array_equal(rep.rmse_mean_mm, 0)
    assert list(rep.steps) == list(range(1, 21))


def test_persistence_error_grows(data):
    rep = ro.evaluate(ro.PersistencePredictor(), data, 40, 5, 20, seed=0, split="train")
    m = rep.rmse_mean_mm
    assert np.all(rep.rmse_std_mm >= 0)
    assert m[0] > 0 and m[-1] > 1.5 * m[0]
    # monotone on coarse 5-step blocks despite sampling noise
    blocks = m.reshape(4, 5).mean(axis=1)
    assert np.all(np.diff(blocks) > 0)


def test_window_draws_are_seeded(data):
    a = ro.draw_windows(data, 10, 5, 20, seed=4)
    b = ro.draw_windows(data, 10, 5, 20, seed=4)
    assert np.array_equal(a, b)
    with pytest.raises(EmptyDataset):
        ro.draw_windows(data, 10, 5, 40, seed=0)


def test_csv_outputs(tmp_path, data):
    rep = ro.evaluate(ro.PersistencePredictor(), data, 5, 5, 4, seed=0)
    ro.write_rmse_csv(rep, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "step,rmse_mean_mm,rmse_std_mm" and len(lines) == 5
    win, pred = ro.run_rollouts(ro.PersistencePredictor(), data, 5, 5, 4, seed=0)
    agg, n = ro.topology_curve(win, pred, 1e-6)
    assert n == 5 and agg["match_fraction_mean"][0] <= 1
    ro.write_topology_csv(agg, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "step,match_fraction_mean,match_fraction_std,ambiguous_fraction"


def test_bench_latency(model):
    s = ro.bench_latency(model, n_steps=5, n_repeats=1, warmup_iters=1)
    assert s.std_ms == 0.0 and s.n == 1 and s.mean_ms > 0
    with pytest.raises(ProtocolError):
        ro.bench_latency(model, n_steps=0)
