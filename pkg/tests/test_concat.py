import json

import numpy as np
import pytest

from fena import concat, sfne
from fena.errors import ConfigError
from fena.rod import HarmonicLoad, RodSpec, rod_case1_response
from fena.sfne import Block


def knee_profile(n=100, knee=75, seed=0):
    """Typical per-step error: a little raised at the start, flat in the middle, rising fast after ``knee``."""
    r = np.random.default_rng(seed)
    t = np.arange(1, n + 1)
    base = 0.1 + 0.005 * r.random(n) + 0.05 * np.exp(-t / 3.0)
    rise = np.where(t > knee, 0.06 * (t - knee), 0.0)
    return base + rise


def brute_cutoff(e, factor=1.5):
    n = len(e)
    mid = sorted(e[n // 4: n - n // 4])
    m = len(mid)
    med = mid[m // 2] if m % 2 else 0.5 * (mid[m // 2 - 1] + mid[m // 2])
    best = 1
    for t in range(1, n + 1):
        if e[t - 1] <= factor * med:
            best = t
    return min(best, n - 1)


def test_cutoff_on_knee_profile_is_75():
    assert concat.find_cutoff(knee_profile()).t_c == 75


@pytest.mark.parametrize("seed", range(5))
def test_cutoff_knee_robust_to_noise(seed):
    assert concat.find_cutoff(knee_profile(seed=seed)).t_c == 75


def test_flat_profile_gives_last_usable_step_and_flag():
    c = concat.find_cutoff(np.full(100, 0.2))
    assert c.t_c == 99 and c.flat


def test_end_spike_matches_brute_force_rule():
    e = np.full(100, 0.2) + 0.001 * np.arange(100)
    e[-1] = 5.0
    c = concat.find_cutoff(e)
    assert c.t_c == brute_cutoff(list(e)) == 99 and not c.flat
    for seed in range(20):
        e = np.random.default_rng(seed).gamma(2.0, size=40)
        assert concat.find_cutoff(e).t_c == brute_cutoff(list(e))


def test_cutoff_needs_four_steps():
    with pytest.raises(ConfigError):
        concat.find_cutoff([1, 2, 3])


def test_ensemble_size_rule():
    assert concat.size_from_curve([0.5]) == 1
    # typical ensemble curve: big drops to three members, then marginal gains
    assert concat.size_from_curve([1.0, 0.72, 0.58, 0.565, 0.56, 0.556]) == 3
    assert concat.size_from_curve([1.0, 0.96]) == 1


def test_duplicated_members_select_one():
    r = np.random.default_rng(0)
    truth = r.normal(size=(5, 8, 6))

    class T:
        out = truth

    p = truth + 0.1 * r.normal(size=truth.shape)
    k, curve = concat.select_ensemble_size([p, p.copy(), p.copy()], T, channels=2)
    assert k == 1 and np.allclose(curve, curve[0])


def test_independent_members_improve_curve():
    r = np.random.default_rng(1)
    truth = r.normal(size=(5, 8, 6))

    class T:
        out = truth

    preds = [truth + 0.1 * r.normal(size=truth.shape) for _ in range(4)]
    k, curve = concat.select_ensemble_size(preds, T, channels=2)
    assert k == 4 and np.all(np.diff(curve) < 0)


def test_segment_plan_thousand_steps():
    plan = concat.segment_plan(1000, 75)
    assert len(plan) == 14 and plan[-1] == (975, 25)
    assert all(k == 75 for _, k in plan[:13])
    assert concat.segment_plan(60, 75) == [(0, 60)]
    assert concat.segment_plan(150, 75) == [(0, 75), (75, 75)]


@pytest.fixture(scope="module")
def exact_long():
    rod = RodSpec.reference()
    load = HarmonicLoad(1.0, 211.3)
    t = np.arange(1001) * 1e-3
    h = rod_case1_response(rod, load, np.linspace(0, 1, 51), t)
    return load, np.hstack([h.u, h.u_dot])          # rows are steps 0..1000


def test_oracle_in_the_loop_is_exact(exact_long):
    load, full = exact_long
    seen = []

    def oracle(static, d, start):
        # handoff and phase bookkeeping: state and load must match the global solution
        assert np.array_equal(static[-2], full[start, :51])
        assert np.array_equal(static[-1], full[start, 51:])
        np.testing.assert_array_equal(d[:, 0], load.value(np.arange(start + 1, start + 101) * 1e-3))
        seen.append(start)
        return full[start + 1:start + 101]

    res = concat.concatenate(oracle, load.value, np.zeros((2, 51)), 1000, 75, 100, 1e-3, truth=full[1:])
    assert np.array_equal(res.out, full[1:])
    assert res.error == 0.0 and all(e == 0.0 for e in res.segment_errors)
    assert seen == [75 * j for j in range(14)]


def test_short_horizon_is_single_prediction(exact_long):
    load, full = exact_long
    calls = []

    def oracle(static, d, start):
        calls.append(start)
        return full[start + 1:start + 101]

    res = concat.concatenate(oracle, load.value, np.zeros((2, 51)), 60, 75, 100, 1e-3)
    assert calls == [0] and np.array_equal(res.out, full[1:61])


def test_handoff_uses_stored_prediction_bitwise():
    r = np.random.default_rng(3)
    states = []

    def noisy(static, d, start):
        states.append(static.copy())
        return r.normal(size=(10, 8))

    res = concat.concatenate(noisy, np.sin, np.zeros((3, 4)), 25, 7, 10, 0.01)
    for j, (start, keep) in enumerate(res.segments[1:], start=1):
        np.testing.assert_array_equal(states[j][-2], res.out[start - 1, :4])
        np.testing.assert_array_equal(states[j][-1], res.out[start - 1, 4:])
        np.testing.assert_array_equal(states[j][0], 0.0)      # leading static rows untouched


def test_missing_velocity_channel_rejected():
    with pytest.raises(ConfigError, match="velocity"):
        concat.concatenate(lambda s, d, k: np.zeros((10, 4)), np.sin, np.zeros((2, 4)), 20, 5, 10, 0.01)


def test_network_element_path_and_outputs(tmp_path):
    init = Block.of((3, 2), ("tanh", "eswish"))
    arch = sfne.ArchSpec(n_t=10, n_x=4, in_dyn_width=1, in_static_shape=(2, 4), cells=2, fhs=init, bhs=init,
                         fcs=init, bcs=init, ind=Block.of((3,), ("tanh",)), out=Block.of((5,), ("eswish",)),
                         output_width=8)
    m = sfne.build(arch, 0)
    ens = sfne.Ensemble([m, sfne.build(arch, 1)])
    res = concat.concatenate(ens, np.sin, np.zeros((2, 4)), 23, 8, 10, 0.01)
    assert res.k == 2 and res.out.shape == (23, 8) and len(res.segments) == 3
    single = concat.concatenate(m, np.sin, np.zeros((2, 4)), 8, 8, 10, 0.01)
    np.testing.assert_array_equal(single.out, sfne.predict(m, np.zeros((2, 4)), np.sin(np.arange(1, 11) * 0.01)[:, None])[:8])
    res.to_csv(tmp_path / "long.csv")
    lines = (tmp_path / "long.csv").read_text().splitlines()
    assert lines[0] == "step,time,x,u,u_dot" and len(lines) == 1 + 23 * 4
    assert [float(v) for v in lines[1].split(",")][3] == res.out[0, 0]
    meta = json.loads((tmp_path / "long.csv.json").read_text())
    assert meta["t_c"] == 8 and meta["k"] == 2 and meta["segment_count"] == 3
