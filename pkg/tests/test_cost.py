import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regionvlp.cost import estimate_cost, format_report


def test_eight_frames_thirty_regions():
    rep = estimate_cost(8, 30)
    assert rep["region"]["tokens"] == 241
    assert rep["patch"]["tokens"] == 1569
    assert rep["attention_ratio"] == pytest.approx((1569 / 241) ** 2)
    assert rep["attention_ratio"] == pytest.approx(42.4, abs=0.1)


def test_single_frame():
    assert estimate_cost(1, 30)["region"]["tokens"] == 31


def test_flop_formulas():
    rep = estimate_cost(2, 3, patches_per_frame=5, d=4, layers=2)
    t = 7
    assert rep["region"]["attention_flops"] == 4 * t * t * 4 * 2
    assert rep["region"]["projection_flops"] == 8 * t * 16 * 2
    assert rep["region"]["mlp_flops"] == 16 * t * 16 * 2


def test_report_states_model():
    text = format_report(estimate_cost(8, 30))
    assert "4*T^2*d" in text.splitlines()[0]
    assert "42.4x" in text


@pytest.mark.parametrize("bad", [dict(frames=0), dict(frames=1, d=0), dict(frames=1, layers=-1)])
def test_rejects_non_positive(bad):
    with pytest.raises(ValueError):
        estimate_cost(**bad)


@settings(max_examples=100, deadline=None)
@given(
    st.integers(1, 16), st.integers(1, 64), st.integers(1, 400), st.integers(1, 1024), st.integers(1, 24),
    st.sampled_from(["frames", "regions_per_frame", "patches_per_frame", "d", "layers"]),
)
def test_monotone(m, n, p, d, layers, which):
    args = dict(frames=m, regions_per_frame=n, patches_per_frame=p, d=d, layers=layers)
    base = estimate_cost(**args)
    args[which] += 1
    bigger = estimate_cost(**args)
    for kind in ("region", "patch"):
        for key in ("tokens", "attention_flops", "projection_flops", "mlp_flops", "total_flops"):
            assert bigger[kind][key] >= base[kind][key]
