from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from neuroproj.core_types import (
    CorrectionBuffer,
    GroupPartition,
    MassModel,
    ProjectionConfig,
    ScenarioTag,
    SystemState,
    TrajectoryDataset,
    TrajectorySample,
    coord_index,
    state_scatter_add,
    state_slice,
)


def four() -> SystemState:
    return SystemState(np.arange(8.0), 2, np.zeros(4, dtype=bool))


def test_positions_must_be_multiple_of_dim():
    with pytest.raises(ValueError):
        SystemState(np.zeros(5), 2)


def test_state_slice_prefix():
    s = state_slice(four(), [0, 1])
    np.testing.assert_array_equal(s.positions, [0, 1, 2, 3])
    assert s.num_particles == 2


def test_state_slice_identity():
    s = four()
    t = state_slice(s, [0, 1, 2, 3])
    np.testing.assert_array_equal(t.positions, s.positions)
    np.testing.assert_array_equal(t.pin_mask, s.pin_mask)


def test_state_slice_out_of_range():
    with pytest.raises(IndexError):
        state_slice(four(), [5])


def test_state_slice_keeps_order_and_pins():
    s = SystemState(np.arange(8.0), 2, np.array([0, 1, 0, 1], dtype=bool))
    t = state_slice(s, [3, 0])
    np.testing.assert_array_equal(t.positions, [6, 7, 0, 1])
    np.testing.assert_array_equal(t.pin_mask, [True, False])


def test_scatter_single():
    buf = state_scatter_add(CorrectionBuffer(four()), [0], [1.0, 1.0])
    np.testing.assert_array_equal(buf.sums[0], [1, 1])
    assert buf.counts[0] == 1


def test_scatter_two_writes_average():
    buf = CorrectionBuffer(four())
    state_scatter_add(buf, [2], [2.0, 0.0])
    state_scatter_add(buf, [2], [0.0, 2.0])
    np.testing.assert_array_equal(buf.finalize().reshape(4, 2)[2], [1, 1])


def test_scatter_pinned_is_skipped():
    s = SystemState(np.zeros(4), 2, np.array([True, False]))
    buf = state_scatter_add(CorrectionBuffer(s), [0], [5.0, 5.0])
    assert buf.counts[0] == 0
    np.testing.assert_array_equal(buf.finalize(), 0.0)


def test_scatter_length_mismatch():
    with pytest.raises(ValueError):
        state_scatter_add(CorrectionBuffer(four()), [0, 1], [1.0, 2.0, 3.0])


@given(
    st.lists(st.floats(-1e3, 1e3), min_size=10, max_size=10),
    st.lists(st.booleans(), min_size=5, max_size=5),
    st.permutations(range(5)),
)
def test_slice_scatter_round_trip(values, pins, perm):
    state = SystemState(np.array(values), 2, np.array(pins))
    sub = state_slice(state, perm)
    buf = state_scatter_add(CorrectionBuffer(state.with_positions(np.zeros(10))), perm, sub.positions)
    out = buf.finalize().reshape(5, 2)
    P = state.points()
    free = ~np.array(pins)
    np.testing.assert_array_equal(out[free], P[free])


def test_coord_index_interleaved():
    np.testing.assert_array_equal(coord_index([2, 0], 2), [4, 5, 0, 1])
    np.testing.assert_array_equal(coord_index([1], 3), [3, 4, 5])


def test_trajectory_sample_shares_layout():
    frames = [SystemState(np.full(4, float(k)), 2) for k in range(3)]
    t = TrajectorySample.from_frames(frames, dt=0.1)
    assert t.num_frames == 3 and t.num_particles == 2 and t.dt == 0.1
    bad = frames[:2] + [SystemState(np.zeros(6), 2)]
    with pytest.raises(ValueError):
        TrajectorySample.from_frames(bad)
    with pytest.raises(ValueError):
        TrajectorySample(np.zeros((3, 4)), dt=0.0)


def test_dataset_subset_and_particles():
    pos = np.arange(2 * 3 * 6, dtype=float).reshape(2, 3, 6)
    ds = TrajectoryDataset(pos, [4, 7, 9], ScenarioTag.rope, pin_mask=np.array([1, 0, 0], bool))
    sub = ds.subset([1])
    assert sub.num_samples == 1 and sub.frames_per_sample == 3
    np.testing.assert_array_equal(sub.positions[0], pos[1])
    part = ds.particles([2, 0])
    assert part.observation_indices == [9, 4]
    np.testing.assert_array_equal(part.pin_mask, [False, True])
    np.testing.assert_array_equal(part.positions[..., :2], pos[..., 4:6])
    with pytest.raises(ValueError):
        TrajectoryDataset(pos, [1, 2], ScenarioTag.rope)
    with pytest.raises(ValueError):
        TrajectoryDataset(pos, [1, 2, 3], ScenarioTag.rope, noise_sigma=-1.0)


def test_scenario_tag_parse():
    assert ScenarioTag.parse("rope") is ScenarioTag.rope
    assert ScenarioTag.parse(4) is ScenarioTag.collision
    with pytest.raises(ValueError):
        ScenarioTag.parse("unknown")


def test_partition_shared_map_and_validation():
    p = GroupPartition.chain(3, 8, 2)
    assert p.groups[1] == tuple(range(6, 14))
    assert p.shared[6] == [0, 1] and p.shared[0] == [0]
    p.validate(20)
    with pytest.raises(ValueError):
        p.validate(21)
    with pytest.raises(ValueError):
        p.validate(19)
    with pytest.raises(ValueError):
        GroupPartition(((0, 0, 1),))


@given(st.lists(st.lists(st.integers(0, 40), min_size=1, max_size=6, unique=True), min_size=1, max_size=5))
def test_partition_text_round_trip(groups):
    binding = tuple(f"m{len(g)}" for g in groups)
    p = GroupPartition(tuple(tuple(g) for g in groups), binding)
    assert GroupPartition.loads(p.dumps()) == p


def test_partition_file_default_binding_and_comments():
    p = GroupPartition.loads("0 1 2  # first\n\n2 3 net=tail\n")
    assert p.groups == ((0, 1, 2), (2, 3))
    assert p.net_binding == ("default", "tail")
    with pytest.raises(ValueError):
        GroupPartition.loads("0 x 2\n")


def test_projection_config_validation():
    ProjectionConfig(0, 0.0)  # ablations
    for kw in ({"iterations": -1}, {"relaxation": 1.5}, {"grad_guard": 0.0}, {"sync_mode": "async"}):
        with pytest.raises(ValueError):
            ProjectionConfig(**kw)


def test_mass_model():
    assert np.all(MassModel.uniform(3).per_particle_mass == 1.0)
    np.testing.assert_array_equal(MassModel.uniform(3).inverse(np.array([0, 1, 0], bool)), [1, 0, 1])
    with pytest.raises(ValueError):
        MassModel(np.array([1.0, 0.0]))
