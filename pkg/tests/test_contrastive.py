import math
import warnings

import numpy as np
import pytest

from fairscl.contrastive import (
    GROUP_AWARE,
    PLAIN_SCL,
    AnchorDropWarning,
    EmbeddingBatch,
    PairIndex,
    build_pairs,
    contrastive_loss,
    contrastive_loss_grad,
    loss_and_grad,
    warn_if_mostly_dropped,
)
from fairscl.errors import ValidationError
from oracles import brute_pairs, central_diff, loop_contrastive_loss, rel_err

# below this magnitude a gradient entry is judged on absolute error (FD round-off ~1e-9)
FD_FLOOR = 1e-4


def _unit(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _random_pairs(rng, n):
    while True:
        y = rng.integers(0, 2, n)
        g = rng.choice(["a", "b", "c"][: int(rng.integers(2, 4))], n)
        ps = build_pairs(y, g)
        if len(ps):
            return y, g, ps


# ---------------------------------------------------------------------- pairs


def test_four_record_example():
    # (COVID+, male), (COVID+, female), (COVID-, male), (COVID-, female)
    labels = [1, 1, 0, 0]
    groups = ["M", "F", "M", "F"]
    ps = build_pairs(labels, groups, GROUP_AWARE)
    first = [p for p in ps if p.anchor == 0][0]
    assert first.positives == (1,) and first.negatives == (2,)
    assert len(ps) == 4 and ps.dropped == 0
    plain = build_pairs(labels, groups, PLAIN_SCL)
    first_plain = [p for p in plain if p.anchor == 0][0]
    assert first_plain.positives == (1,) and first_plain.negatives == (2, 3)


def test_single_group_drops_everything():
    ps = build_pairs([1, 0, 1, 0, 1], ["M"] * 5, GROUP_AWARE)
    assert len(ps) == 0 and ps.dropped == 5


def test_pairs_match_predicates():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n = int(rng.integers(2, 13))
        y = rng.integers(0, 2, n).tolist()
        g = rng.choice(["a", "b", "c"], n).tolist()
        for mode in (GROUP_AWARE, PLAIN_SCL):
            ps = build_pairs(y, g, mode)
            got = {p.anchor: (p.positives, p.negatives) for p in ps}
            assert got == brute_pairs(y, g, mode)
            assert ps.dropped == n - len(got)


def test_pair_legality():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        y = rng.integers(0, 2, n)
        g = rng.choice(["w", "b", "o"], n)
        for p in build_pairs(y, g, GROUP_AWARE):
            i = p.anchor
            assert i not in p.positives and i not in p.negatives
            assert not set(p.positives) & set(p.negatives)
            assert all(y[j] == y[i] and g[j] != g[i] for j in p.positives)
            assert all(y[j] != y[i] and g[j] == g[i] for j in p.negatives)


def test_unique_groups():
    # every record in its own group: no same-group negatives, so group-aware keeps no anchors
    y = [1, 0, 1, 0, 1, 0]
    g = [f"g{i}" for i in range(6)]
    assert len(build_pairs(y, g, GROUP_AWARE)) == 0
    # plain pairs ignore groups entirely
    plain = build_pairs(y, g, PLAIN_SCL)
    assert [(p.positives, p.negatives) for p in plain] == [
        (p.positives, p.negatives) for p in build_pairs(y, ["x"] * 6, PLAIN_SCL)
    ]


def test_eight_record_fixture_enumerated():
    y = [1, 1, 1, 0, 0, 0, 1, 0]
    g = ["A", "A", "B", "A", "B", "B", "C", "C"]
    aware = {p.anchor: (p.positives, p.negatives) for p in build_pairs(y, g, GROUP_AWARE)}
    assert aware == {
        0: ((2, 6), (3,)),
        1: ((2, 6), (3,)),
        2: ((0, 1, 6), (4, 5)),
        3: ((4, 5, 7), (0, 1)),
        4: ((3, 7), (2,)),
        5: ((3, 7), (2,)),
        6: ((0, 1, 2), (7,)),
        7: ((3, 4, 5), (6,)),
    }
    plain = {p.anchor: (p.positives, p.negatives) for p in build_pairs(y, g, PLAIN_SCL)}
    assert plain[0] == ((1, 2, 6), (3, 4, 5, 7))
    assert plain[3] == ((4, 5, 7), (0, 1, 2, 6))
    assert plain != aware


def test_build_pairs_rejects_tiny_batch():
    with pytest.raises(ValidationError):
        build_pairs([1], ["a"])


def test_drop_warning():
    ps = build_pairs([1, 0] * 10, ["x"] * 20)
    with pytest.warns(AnchorDropWarning):
        assert warn_if_mostly_dropped(ps)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert not warn_if_mostly_dropped(build_pairs([1, 1, 0, 0], ["M", "F", "M", "F"]))


# ---------------------------------------------------------------------- loss values


def test_symmetric_similarities_give_zero():
    z = np.array([[1.0, 0.0], [0.6, 0.8], [0.6, -0.8]])
    pairs = [PairIndex(0, (1,), (2,))]
    for tau in (0.05, 0.5, 3.0):
        assert abs(contrastive_loss(EmbeddingBatch(z, tau), pairs)) < 1e-12


def test_ln2_example():
    z = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
    pairs = [PairIndex(0, (1,), (2, 3))]
    assert abs(contrastive_loss(EmbeddingBatch(z, 1.0), pairs) - math.log(2)) < 1e-12


def test_lower_temperature_lowers_loss():
    zi = np.array([1.0, 0.0])
    zp = np.array([0.9, math.sqrt(1 - 0.81)])
    zn = np.array([0.1, -math.sqrt(1 - 0.01)])
    z = np.vstack([zi, zp, zn])
    pairs = [PairIndex(0, (1,), (2,))]
    hi = contrastive_loss(EmbeddingBatch(z, 1.0), pairs)
    lo = contrastive_loss(EmbeddingBatch(z, 0.05), pairs)
    assert lo < hi


def test_matches_loop_oracle_both_forms():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(3, 12))
        y, g, ps = _random_pairs(rng, n)
        z = _unit(rng, n, 5)
        tau = float(rng.uniform(0.1, 2.0))
        for log_form in (True, False):
            got = loss_and_grad(z, tau, ps, log_form)[0]
            want = loop_contrastive_loss(z, tau, ps, log_form)
            assert abs(got - want) <= 1e-10 * max(1.0, abs(want))


def test_stable_at_extreme_similarity():
    rng = np.random.default_rng(3)
    y, g, ps = _random_pairs(rng, 10)
    z = _unit(rng, 10, 4)
    loss, grad = loss_and_grad(z, 1e-3, ps)
    assert np.isfinite(loss) and np.isfinite(grad).all()


def test_duplicated_positives_equal_similarity():
    z = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [-1.0, 0.0]])
    one = [PairIndex(0, (1,), (3,))]
    doubled = [PairIndex(0, (1, 2), (3,))]
    assert abs(loss_and_grad(z, 0.5, one)[0] - loss_and_grad(z, 0.5, doubled)[0]) < 1e-12
    repeated = [PairIndex(0, (1, 1), (3,))]
    assert abs(loss_and_grad(z, 0.5, one)[0] - loss_and_grad(z, 0.5, repeated)[0]) < 1e-12


def test_permutation_equivariance():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n = int(rng.integers(3, 14))
        y, g, ps = _random_pairs(rng, n)
        z = _unit(rng, n, 6)
        perm = rng.permutation(n)
        ps2 = build_pairs(y[perm], g[perm])
        assert {perm[p.anchor] for p in ps2} == {p.anchor for p in ps}
        a = loss_and_grad(z, 0.1, ps)[0]
        b = loss_and_grad(z[perm], 0.1, ps2)[0]
        assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


def test_temperature_scaling_equivalence():
    rng = np.random.default_rng(5)
    for _ in range(30):
        y, g, ps = _random_pairs(rng, 8)
        z = _unit(rng, 8, 4)
        c = float(rng.uniform(0.2, 5.0))
        # tau / c on unit rows == every dot product scaled by c at tau
        a = loss_and_grad(z, 0.3 / c, ps)[0]
        b = loss_and_grad(math.sqrt(c) * z, 0.3, ps)[0]
        assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


def test_embedding_batch_validation():
    with pytest.raises(ValidationError):
        EmbeddingBatch(np.ones((2, 2)), 0.1)
    with pytest.raises(ValidationError):
        EmbeddingBatch(np.eye(2), 0.0)
    assert np.allclose(np.linalg.norm(EmbeddingBatch.normalized(np.ones((3, 2)), 1.0).z, axis=1), 1.0)


def test_contract_violations():
    z = np.eye(3)
    with pytest.raises(ValidationError):
        loss_and_grad(z, 1.0, [])
    with pytest.raises(ValidationError):
        loss_and_grad(z, 1.0, [PairIndex(0, (1,), ())])
    with pytest.raises(ValidationError):
        loss_and_grad(z, 1.0, [PairIndex(0, (1,), (7,))])


# ---------------------------------------------------------------------- gradients


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        y, g, ps = _random_pairs(rng, 8)
        z = _unit(rng, 8, 16)
        loss, grad = contrastive_loss_grad(EmbeddingBatch(z, 0.05), ps)
        fd = central_diff(lambda: loss_and_grad(z, 0.05, ps)[0], z, h=1e-5)
        worst = max(worst, rel_err(grad, fd, floor=FD_FLOOR))
    assert worst <= 1e-5


def test_no_log_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(30):
        y, g, ps = _random_pairs(rng, 6)
        z = _unit(rng, 6, 5)
        _, grad = loss_and_grad(z, 0.5, ps, log_form=False)
        fd = central_diff(lambda: loss_and_grad(z, 0.5, ps, log_form=False)[0], z)
        assert rel_err(grad, fd, floor=FD_FLOOR) <= 1e-5


def test_unused_records_get_zero_gradient():
    rng = np.random.default_rng(8)
    z = _unit(rng, 6, 3)
    pairs = [PairIndex(0, (1,), (2,)), PairIndex(1, (0,), (3,))]
    _, grad = loss_and_grad(z, 0.1, pairs)
    assert np.all(grad[4:] == 0.0)
