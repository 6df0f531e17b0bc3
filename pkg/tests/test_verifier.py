import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_differences, crop_formula
from patch_actor.candidates import CandidatePoint, SelectionConfig
from patch_actor.errors import DegenerateLabels, InvalidArgument, SchemaError
from patch_actor.geometry import make_grid
from patch_actor.synthgui import gen_dataset, gen_verifier_data, init_encoder
from patch_actor.verifier import (
    CropWindow,
    OracleScorer,
    ScoringContext,
    VerifierTrainConfig,
    crop_window,
    load_verifier,
    logistic_loss_and_grad,
    oracle_score,
    save_verifier,
    select,
    self_aggregate_score,
    train_toy_verifier,
    verifier_accuracy,
)

GRID = make_grid(448, 336, 28)
REC = gen_dataset(0, 1, GRID, 3, 8)[0]
CTX = ScoringContext(REC)


def pts(n):
    return [CandidatePoint(10.0 * k, 5.0, 1.0 - 0.01 * k, "patch") for k in range(n)]


class Table:
    """Scorer returning preset values by candidate x, logging calls."""

    def __init__(self, values):
        self.values = values
        self.calls = []

    def __call__(self, ctx, point, window):
        self.calls.append(point)
        v = self.values[int(point[0] // 10)]
        if isinstance(v, Exception):
            raise v
        return v


@settings(max_examples=300, deadline=None)
@given(
    x=st.floats(0, 3000, allow_nan=False),
    y=st.floats(0, 3000, allow_nan=False),
    c=st.integers(2, 3000),
    W=st.integers(1, 3000),
    H=st.integers(1, 3000),
)
def test_crop_matches_formula_inside_image(x, y, c, W, H):
    x, y = min(x, W - 1), min(y, H - 1)
    assert crop_window((x, y), c, W, H).as_tuple() == crop_formula(x, y, c, W, H)


def test_crop_examples():
    assert crop_window((960, 540), 1000, 1920, 1080).as_tuple() == (460, 40, 1460, 1040)
    assert crop_window((0, 0), 1000, 1920, 1080).as_tuple() == (0, 0, 500, 500)
    assert crop_window((100, 100), 1000, 200, 200).as_tuple() == (0, 0, 200, 200)
    assert crop_window((5, 5), 1, 10, 10).width == 1
    with pytest.raises(InvalidArgument):
        crop_window((5, 5), 0, 10, 10)


def test_oracle_perfect():
    w, h = REC.image_dims
    cx, cy = REC.gt_bbox.center()
    assert oracle_score(REC, (cx * w, cy * h)) == 1.0
    assert oracle_score(REC, (REC.gt_bbox.right * w + 30, cy * h)) == 0.0


def test_oracle_noise_rate_and_determinism():
    w, h = REC.image_dims
    cx, cy = REC.gt_bbox.center()
    pts_ = [(cx * w + 0.001 * k, cy * h) for k in range(4000)]
    a = [oracle_score(REC, p, 0.1, 7) for p in pts_]
    assert a == [oracle_score(REC, p, 0.1, 7) for p in pts_]
    assert abs(1 - np.mean(a) - 0.1) < 0.015


def test_select_early_exit():
    t = Table([0.2, 0.97, 1.0])
    res = select(pts(3), t, CTX, SelectionConfig(gamma=0.95))
    assert res.chosen.x == 10 and res.evaluated_count == 2 and res.early_exit
    assert len(t.calls) == 2


def test_select_fallback_argmax_earliest():
    res = select(pts(4), Table([0.1, 0.6, 0.6, 0.3]), CTX, SelectionConfig(gamma=0.95))
    assert res.chosen.x == 10 and res.fallback_used and not res.early_exit
    assert res.evaluated_count == 4


def test_select_score_equal_gamma_does_not_exit():
    res = select(pts(2), Table([0.95, 0.5]), CTX, SelectionConfig(gamma=0.95))
    assert res.evaluated_count == 2 and res.chosen.x == 0


def test_select_gamma_zero_takes_first():
    res = select(pts(3), Table([0.0, 1.0, 1.0]), CTX, SelectionConfig(gamma=0.0))
    assert res.chosen.x == 0 and res.evaluated_count == 1


def test_select_scorer_failures_count_as_zero():
    res = select(pts(3), Table([RuntimeError("boom"), 1.7, 0.4]), CTX, SelectionConfig(gamma=0.95))
    assert res.failures == (0, 1)
    assert res.chosen.x == 20


def test_select_all_failures_returns_first():
    res = select(pts(2), Table([RuntimeError(), RuntimeError()]), CTX, SelectionConfig(gamma=0.95))
    assert res.chosen.x == 0 and res.fallback_used


def test_select_empty_raises():
    with pytest.raises(InvalidArgument):
        select([], Table([]), CTX)


def test_select_parallel_same_result():
    from concurrent.futures import ThreadPoolExecutor

    t = Table([0.2, 0.4, 0.99, 0.1])
    with ThreadPoolExecutor(2) as ex:
        par = select(pts(4), t, CTX, SelectionConfig(), executor=ex)
    seq = select(pts(4), Table([0.2, 0.4, 0.99, 0.1]), CTX, SelectionConfig())
    assert par.to_json() == seq.to_json()


def test_self_aggregate_mean():
    def by_size(ctx, point, window):
        return {1200: 0.2, 1400: 0.9, 1600: 0.4}[window.size]

    assert self_aggregate_score(CTX, (10, 10), by_size, (1200, 1400)) == (0.2 + 0.9) / 2
    assert self_aggregate_score(CTX, (10, 10), by_size, (1200, 1400, 1600)) == np.mean([0.2, 0.9, 0.4])
    with pytest.raises(InvalidArgument):
        self_aggregate_score(CTX, (10, 10), by_size, ())


def test_logistic_gradient(rng):
    X = rng.normal(size=(30, 6))
    y = (rng.random(30) < 0.5).astype(float)
    w = rng.normal(size=6)
    b = np.array([0.3])
    _, gw, gb = logistic_loss_and_grad(w, b[0], X, y, 0.1)
    num = central_differences(lambda: logistic_loss_and_grad(w, b[0], X, y, 0.1)[0], {"w": w, "b": b}, h=1e-5)
    np.testing.assert_allclose(gw, num["w"], rtol=1e-6, atol=1e-9)
    assert gb == pytest.approx(num["b"][0], rel=1e-6)


def test_toy_verifier_learns_and_roundtrips(tmp_path):
    enc = init_encoder(8, 16, 0)
    ex = gen_verifier_data(gen_dataset(3, 40, GRID, 4, 8), 3)
    v = train_toy_verifier(ex, enc, VerifierTrainConfig(steps=200))
    assert verifier_accuracy(v, ex) > 0.9
    p = tmp_path / "v.json"
    save_verifier(v, p)
    back = load_verifier(p)
    e = ex[0]
    w, h = e.record.image_dims
    win = CropWindow(0, 0, w, h)
    assert back(ScoringContext(e.record), e.marked_point, win) == v(ScoringContext(e.record), e.marked_point, win)
    p.write_text("[")
    with pytest.raises(SchemaError):
        load_verifier(p)


def test_toy_verifier_single_label():
    ex = [e for e in gen_verifier_data(gen_dataset(3, 3, GRID, 2, 8), 3) if e.label]
    with pytest.raises(DegenerateLabels):
        train_toy_verifier(ex, init_encoder(8, 16, 0))


def test_oracle_scorer_validation():
    with pytest.raises(InvalidArgument):
        OracleScorer(noise_rate=1.0)
