import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dem.errors import DataError, DegenerateLabels, InvalidSpec, TooFewSamples
from dem.nn_core import TrainConfig, accuracy, init_column, train_supervised
from dem.synth_domains import (
    DomainDataset,
    ShiftSpec,
    generate_domain_pair,
    load_spec,
    make_split,
    median_split_labels,
    read_csv,
    rotation_matrix,
    write_csv,
)


def labeled(n, n_pos=None, seed=0):
    n_pos = n // 2 if n_pos is None else n_pos
    y = np.array([1] * n_pos + [0] * (n - n_pos))
    x = np.random.default_rng(seed).standard_normal((n, 3))
    return DomainDataset(x, y, None, "source", np.arange(n))


def domain_discriminator_accuracy(a, b, seed=0):
    """Held-out accuracy of a small network telling two feature sets apart."""
    x = np.concatenate([a, b])
    y = np.r_[np.zeros(len(a), dtype=int), np.ones(len(b), dtype=int)]
    perm = np.random.default_rng(seed).permutation(len(x))
    x, y = x[perm], y[perm]
    cut = len(x) * 3 // 5
    mid = len(x) * 4 // 5
    mk = lambda s: DomainDataset(x[s], y[s], None, "source", np.arange(len(x))[s])
    col = init_column((x.shape[1], 32, 16), seed)
    train_supervised(col, mk(slice(0, cut)), mk(slice(cut, mid)),
                     TrainConfig(max_epochs=60, patience=10, learning_rate=3e-3, seed=seed))
    return accuracy(col, x[mid:], y[mid:])


# -- generate_domain_pair -------------------------------------------------------

def test_zero_shift_source_classifier_transfers():
    src, tgt = generate_domain_pair(ShiftSpec(seed=3))
    col = init_column((10, 32, 16), 0)
    train_supervised(col, src.subset(np.arange(1600)), src.subset(np.arange(1600, 2000)),
                     TrainConfig(max_epochs=40, learning_rate=1e-3))
    src_acc = accuracy(col, src.features, src.labels)
    tgt_acc = accuracy(col, tgt.features, tgt.hidden_labels)
    # two proportions on n=2000 each: 3 standard errors is about 2 points here
    assert abs(src_acc - tgt_acc) < 0.02


def test_quarter_turn_in_two_dims_is_the_rotation_matrix():
    base = ShiftSpec(d=2, n_source=50, n_target=50, seed=9)
    _, plain = generate_domain_pair(base)
    _, turned = generate_domain_pair(ShiftSpec(**{**base.to_dict(), "rotation_angle": np.pi / 2}))
    R = np.array([[0.0, -1.0], [1.0, 0.0]])
    np.testing.assert_allclose(turned.features, plain.features @ R.T, atol=1e-12)
    np.testing.assert_allclose(rotation_matrix(2, np.pi / 2), R, atol=1e-15)


def test_fixed_seed_is_bit_identical():
    a = generate_domain_pair(ShiftSpec(seed=42))
    b = generate_domain_pair(ShiftSpec(seed=42))
    for x, y in zip(a, b):
        assert x.features.tobytes() == y.features.tobytes()
        assert x.continuous_outcome.tobytes() == y.continuous_outcome.tobytes()
        assert np.array_equal(x.eval_labels(), y.eval_labels())


def test_target_labels_are_hidden():
    _, tgt = generate_domain_pair(ShiftSpec(n_source=20, n_target=20))
    assert tgt.labels is None and tgt.hidden_labels is not None
    assert tgt.domain_tag == "target"


def test_label_flip_rate_flips_exact_count():
    base = ShiftSpec(n_source=100, n_target=400, seed=2)
    _, clean = generate_domain_pair(base)
    _, noisy = generate_domain_pair(ShiftSpec(**{**base.to_dict(), "label_flip_rate": 0.1}))
    assert np.sum(clean.hidden_labels != noisy.hidden_labels) == 40


def test_domain_discriminator_zero_shift_near_chance():
    src, tgt = generate_domain_pair(ShiftSpec(seed=11))
    assert abs(domain_discriminator_accuracy(src.features, tgt.features) - 0.5) <= 0.03


def optimal_domain_discriminator(spec, x):
    """Bayes rule P(target | x) > 1/2 from the generator's exact densities.

    Only the (f0, f1) plane differs between domains, so the other
    coordinates cancel in the density ratio."""
    from scipy.stats import norm

    def plane_density(a, b, prior):
        mix = ((1 - prior) * norm.pdf(a, spec.class_offset - spec.class_separation, spec.class_scales[0])
               + prior * norm.pdf(a, spec.class_offset + spec.class_separation, spec.class_scales[1]))
        return mix * norm.pdf(b)

    R = rotation_matrix(2, spec.rotation_angle)
    back = x[:, :2] @ R              # undo the target rotation
    p_src = plane_density(x[:, 0], x[:, 1], 0.5)
    p_tgt = plane_density(back[:, 0], back[:, 1], spec.class_prior_target)
    return (p_tgt > p_src).astype(int)


def test_optimal_domain_discriminator_separates_rotated_domains():
    spec = ShiftSpec(seed=11, rotation_angle=np.pi / 2)
    src, tgt = generate_domain_pair(spec)
    pred = optimal_domain_discriminator(spec, np.concatenate([src.features, tgt.features]))
    truth = np.r_[np.zeros(len(src)), np.ones(len(tgt))]
    assert np.mean(pred == truth) > 0.90


def test_learned_domain_discriminator_separates_rotated_domains():
    # the optimum is about 90.5% for this geometry, so a network fit on 2400
    # rows is held to a looser bar
    src, tgt = generate_domain_pair(ShiftSpec(seed=11, rotation_angle=np.pi / 2))
    assert domain_discriminator_accuracy(src.features, tgt.features) > 0.85


@pytest.mark.parametrize("kw", [
    {"rotation_angle": 2 * np.pi}, {"rotation_angle": -0.1}, {"class_prior_target": 0.0},
    {"class_prior_target": 1.0}, {"label_flip_rate": 1.0}, {"noise_sigma": -1.0}, {"d": 1},
    {"n_source": 1}, {"seed": -1},
])
def test_invalid_spec(kw):
    with pytest.raises(InvalidSpec):
        generate_domain_pair(ShiftSpec(**kw))


def test_spec_round_trip_and_unknown_keys(tmp_path):
    spec = ShiftSpec(seed=4, rotation_angle=1.0)
    p = tmp_path / "spec.json"
    import json
    p.write_text(json.dumps(spec.to_dict()))
    assert load_spec(p) == spec
    with pytest.raises(InvalidSpec):
        ShiftSpec.from_dict({"bogus": 1})


# -- median split ---------------------------------------------------------------

def test_median_split_examples():
    assert median_split_labels([1, 2, 3, 4]).tolist() == [0, 0, 1, 1]
    assert median_split_labels([3, 1, 2]).tolist() == [1, 0, 0]
    with pytest.raises(DegenerateLabels):
        median_split_labels([5, 5, 5, 5])
    with pytest.raises(DegenerateLabels):
        median_split_labels([1.0])


@given(st.lists(st.integers(-5, 5), min_size=2, max_size=40))
def test_median_split_both_classes_or_raises(values):
    if len(set(values)) < 2:
        with pytest.raises(DegenerateLabels):
            median_split_labels(values)
        return
    try:
        y = median_split_labels(values)
    except DegenerateLabels:
        # only possible when every value above the median is absent, i.e.
        # the maximum equals the median
        assert max(values) == np.median(values)
        return
    assert set(y.tolist()) == {0, 1}
    med = np.median(values)
    assert all((v > med) == bool(l) for v, l in zip(values, y))


# -- splits -----------------------------------------------------------------------

def test_split_sizes_small():
    plan = make_split(labeled(10), 0.2, 4, seed=0)
    assert len(plan.test_indices) == 2
    sizes = sorted(len(plan.fold(k)[1]) for k in range(4))
    assert sizes == [2, 2, 2, 2]


def test_split_deterministic():
    a, b = make_split(labeled(50), 0.2, 5, 7), make_split(labeled(50), 0.2, 5, 7)
    for f in ("train_indices", "val_indices", "test_indices", "fold_assignments"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_split_stratified_test_set():
    ds = labeled(100)
    plan = make_split(ds, 0.2, 5, 3)
    assert np.sum(ds.labels[plan.test_indices] == 1) == 10
    assert np.sum(ds.labels[plan.test_indices] == 0) == 10


@settings(max_examples=60, deadline=None)
@given(n=st.integers(12, 120), frac=st.floats(0.05, 0.5), k=st.integers(2, 6), seed=st.integers(0, 1000),
       pos=st.floats(0.2, 0.8))
def test_split_invariants(n, frac, k, seed, pos):
    ds = labeled(n, int(round(n * pos)))
    try:
        plan = make_split(ds, frac, k, seed)
    except TooFewSamples:
        return
    parts = [plan.train_indices, plan.val_indices, plan.test_indices]
    allidx = np.concatenate(parts)
    assert len(allidx) == n and set(allidx.tolist()) == set(range(n))
    assert len(plan.test_indices) == int(round(n * frac))
    sizes = [len(plan.fold(j)[1]) for j in range(k)]
    assert min(sizes) >= 1 and max(sizes) - min(sizes) <= 1


def test_split_errors():
    with pytest.raises(TooFewSamples):
        make_split(labeled(10), 0.2, 1)
    with pytest.raises(TooFewSamples):
        make_split(labeled(5), 0.2, 5)
    with pytest.raises(TooFewSamples):
        make_split(labeled(10, n_pos=0), 0.2, 2)


# -- dataset / CSV ----------------------------------------------------------------

def test_dataset_validation():
    with pytest.raises(DataError):
        DomainDataset(np.zeros((3, 2)), None, None, "source", [1, 1, 2])
    with pytest.raises(DataError):
        DomainDataset(np.zeros((3, 2)), [0, 2, 1], None, "source", [0, 1, 2])
    with pytest.raises(DataError):
        DomainDataset(np.zeros((3, 2)), None, None, "elsewhere", [0, 1, 2])


def test_csv_round_trip(tmp_path):
    src, tgt = generate_domain_pair(ShiftSpec(n_source=30, n_target=30, d=4, seed=1))
    write_csv(src, tmp_path / "s.csv")
    write_csv(tgt, tmp_path / "t.csv")
    s2, t2 = read_csv(tmp_path / "s.csv"), read_csv(tmp_path / "t.csv")
    assert s2.features.tobytes() == src.features.tobytes()
    assert np.array_equal(s2.labels, src.labels)
    assert t2.labels is None and np.array_equal(t2.hidden_labels, tgt.hidden_labels)
    assert t2.continuous_outcome.tobytes() == tgt.continuous_outcome.tobytes()
    header = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert header == "id,domain,label,outcome,f0,f1,f2,f3"


def test_csv_unlabeled_writes_minus_one(tmp_path):
    _, tgt = generate_domain_pair(ShiftSpec(n_source=10, n_target=10, d=2))
    write_csv(tgt, tmp_path / "t.csv", include_hidden=False)
    rows = (tmp_path / "t.csv").read_text().splitlines()[1:]
    assert all(r.split(",")[2] == "-1" for r in rows)
    assert read_csv(tmp_path / "t.csv").eval_labels() is None


def test_csv_malformed(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("id,domain,label\n1,source,0\n")
    with pytest.raises(DataError):
        read_csv(p)
    p.write_text("id,domain,label,outcome,f0\n1,source,0,0.1,abc\n")
    with pytest.raises(DataError):
        read_csv(p)
