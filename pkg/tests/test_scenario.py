import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microseg.data import SegSample
from microseg.scenario import (
    ScenarioSpec,
    build_scenario,
    filter_step_dataset,
    load_scenario,
    parse_notation,
    relabel,
    save_scenario,
)


def _sample(mask, sid=0):
    mask = np.asarray(mask, dtype=np.uint8)
    return SegSample(np.zeros((3, *mask.shape), np.float32), mask, sid)


@pytest.mark.parametrize(
    "notation,n,steps,first",
    [("15-1", 20, 6, 15), ("2-2", 20, 10, 2), ("100-10", 150, 6, 100), ("4-1", 8, 5, 4)],
)
def test_step_counts(notation, n, steps, first):
    spec = build_scenario(n, notation)
    assert spec.num_steps == steps
    assert len(spec.classes_at(1)) == first


def test_non_divisible_remainder_is_rejected():
    with pytest.raises(ValueError, match="divisible"):
        build_scenario(10, "4-4")


def test_base_must_leave_incremental_classes():
    with pytest.raises(ValueError, match="B=8"):
        build_scenario(8, "8-1")


def test_bad_notation():
    with pytest.raises(ValueError):
        parse_notation("4+1")


@given(st.integers(2, 60), st.data())
@settings(max_examples=60, deadline=None)
def test_steps_partition_the_classes(n, data):
    base = data.draw(st.integers(1, n - 1))
    divisors = [i for i in range(1, n - base + 1) if (n - base) % i == 0]
    inc = data.draw(st.sampled_from(divisors))
    seed = data.draw(st.none() | st.integers(0, 100))
    spec = build_scenario(n, f"{base}-{inc}", order_seed=seed)
    flat = [c for t in range(1, spec.num_steps + 1) for c in spec.classes_at(t)]
    assert sorted(flat) == list(range(1, n + 1))
    assert spec.num_steps == 1 + (n - base) // inc
    for t in range(1, spec.num_steps + 1):
        assert set(spec.seen_until(t)) == {c for s in range(1, t + 1) for c in spec.classes_at(s)}


def test_explicit_step_sizes_and_order():
    spec = build_scenario(5, step_sizes=[2, 3], class_order=[5, 4, 3, 2, 1])
    assert spec.classes_at(1) == (5, 4)
    assert spec.classes_at(2) == (3, 2, 1)
    with pytest.raises(ValueError):
        ScenarioSpec((1, 2, 2), (3,))


def test_relabel():
    m = np.array([[0, 1, 2], [3, 2, 1]], np.uint8)
    assert relabel(m, {2}).tolist() == [[0, 0, 2], [0, 2, 0]]


def test_filter_overlapped_vs_disjoint():
    spec = build_scenario(4, "2-1")
    data = [_sample([[1, 3]], 0), _sample([[3, 4]], 1), _sample([[3, 0]], 2), _sample([[2, 2]], 3)]
    over = filter_step_dataset(data, spec, 2)
    assert [s.sample_id for s in over.samples] == [0, 1, 2]
    assert over.samples[0].mask.tolist() == [[0, 3]]
    assert over.samples[1].mask.tolist() == [[3, 0]]
    dis = filter_step_dataset(data, spec.__class__(spec.class_order, spec.step_sizes, "disjoint"), 2)
    # sample 1 holds a future class (4) and is excluded under the disjoint protocol
    assert [s.sample_id for s in dis.samples] == [0, 2]
    assert over.current_classes == {3} and over.seen_classes == {1, 2, 3}


def test_filter_empty_step_names_the_step():
    spec = build_scenario(3, "2-1")
    with pytest.raises(ValueError, match="step 2"):
        filter_step_dataset([_sample([[1, 2]])], spec, 2)


def test_scenario_file_round_trip(tmp_path):
    spec = build_scenario(20, "15-1", mode="disjoint")
    save_scenario(spec, tmp_path / "s.txt")
    assert load_scenario(tmp_path / "s.txt") == spec
    shuffled = build_scenario(8, "4-2", order_seed=3)
    save_scenario(shuffled, tmp_path / "o.txt")
    assert load_scenario(tmp_path / "o.txt") == shuffled
    (tmp_path / "bad.txt").write_text("num_classes = 4\nfoo = 1\n")
    with pytest.raises(ValueError, match="foo"):
        load_scenario(tmp_path / "bad.txt")
