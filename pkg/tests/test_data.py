import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnaudit.data import (
    AugmentationScheme,
    Dataset,
    Sample,
    augment,
    augment_features,
    generate_synthetic,
    load_delimited,
    random_half_split,
    save_delimited,
)
from unlearnaudit.errors import ArgumentError, FormatError, ValidationError
from unlearnaudit.model import Recipe, TrainConfig, accuracy


def test_synthetic_tiny_is_balanced():
    ds = generate_synthetic(4, 2, 3, 0.1, 7)
    assert len(ds) == 4 and ds.feature_dim == 3
    assert sorted(ds.labels.tolist()) == [0, 0, 1, 1]


def test_synthetic_is_deterministic():
    a = generate_synthetic(50, 3, 5, 0.4, 11)
    b = generate_synthetic(50, 3, 5, 0.4, 11)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert a != generate_synthetic(50, 3, 5, 0.4, 12)


@pytest.mark.parametrize("n,c", [(10, 3), (11, 4), (100, 7)])
def test_synthetic_class_counts_differ_by_at_most_one(n, c):
    counts = np.bincount(generate_synthetic(n, c, 2, 1.0, 0).labels, minlength=c)
    assert counts.max() - counts.min() <= 1


@pytest.mark.parametrize("args", [(1, 2, 3, 0.1, 0), (4, 0, 3, 0.1, 0), (4, 2, 0, 0.1, 0), (4, 2, 3, 0.0, 0)])
def test_synthetic_rejects_bad_sizes(args):
    with pytest.raises(ArgumentError):
        generate_synthetic(*args)


def test_low_spread_data_is_linearly_separable():
    ds = generate_synthetic(512, 2, 8, 0.1, 1)
    recipe = Recipe((8, 2), TrainConfig(learning_rate=0.5, epochs=50, batch_size=32))
    model = recipe.fit(ds, np.ones(len(ds), bool), 0)
    assert accuracy(model, ds) >= 0.9


def test_dataset_validation():
    with pytest.raises(ValidationError):
        Dataset(np.zeros((2, 2)), np.array([0, 0]), 2)  # class 1 absent
    with pytest.raises(ValidationError):
        Dataset(np.array([[np.nan, 0.0], [0.0, 0.0]]), np.array([0, 1]), 2)
    with pytest.raises(ValidationError):
        Dataset(np.zeros((2, 3)), np.array([0, 1]), 2, grid=(2, 2))


def test_load_two_rows(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("0.0,1.0,0\n1.0,0.0,1\n")
    ds = load_delimited(p, 2)
    assert len(ds) == 2 and ds.feature_dim == 2
    assert ds.sample(1) == Sample(1, np.array([1.0, 0.0]), 1)


def test_load_errors(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("")
    with pytest.raises(FormatError):
        load_delimited(empty, 2)
    bad = tmp_path / "b.csv"
    bad.write_text("0.0,1.0,0\n1.0,x,1\n")
    with pytest.raises(FormatError, match="row 2"):
        load_delimited(bad, 2)
    out = tmp_path / "o.csv"
    out.write_text("0.0,1.0,0\n1.0,0.0,5\n")
    with pytest.raises(ValidationError):
        load_delimited(out, 2)


def test_round_trip(tmp_path):
    ds = generate_synthetic(30, 3, 4, 0.7, 5)
    save_delimited(ds, tmp_path / "d.csv")
    assert load_delimited(tmp_path / "d.csv", 3) == ds


def test_augment_zero_and_copies():
    s = Sample(3, np.array([1.0, -2.0]), 1)
    assert augment(s, 0, AugmentationScheme.jitter(0.3), 0) == []
    copies = augment(s, 5, AugmentationScheme.jitter(0.0), 0)
    assert len(copies) == 5
    assert all(np.array_equal(c.features, s.features) and c.label == 1 for c in copies)


def test_grid_flip_branch():
    s = Sample(0, np.array([1.0, 2.0]), 0)
    outs = augment(s, 50, AugmentationScheme.grid_moves(allow_flip=True, max_shift=0), 4, grid=(1, 2))
    seen = {tuple(o.features) for o in outs}
    assert seen == {(1.0, 2.0), (2.0, 1.0)}


def test_grid_shift_zero_pads():
    s = Sample(0, np.arange(1.0, 10.0), 0)
    outs = augment(s, 200, AugmentationScheme.grid_moves(allow_flip=False, max_shift=1), 0, grid=(3, 3))
    for o in outs:
        img = o.features.reshape(3, 3)
        assert set(np.unique(img)) <= set(range(10))
    # a shift of (1, 1) moves the top-left value to the centre
    assert any(o.features.reshape(3, 3)[1, 1] == 1.0 for o in outs)


def test_grid_scheme_needs_grid_layout():
    with pytest.raises(ArgumentError):
        augment(Sample(0, np.zeros(4), 0), 2, AugmentationScheme.grid_moves(), 0)


def test_augment_features_matches_augment():
    ds = generate_synthetic(10, 2, 3, 1.0, 0)
    scheme = AugmentationScheme.jitter(0.2)
    batch = augment_features(ds, [2, 7], 6, scheme, 9)
    single = np.stack([a.features for a in augment(ds.sample(7), 6, scheme, 9)])
    assert np.array_equal(batch[1], single)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(0, 20), seed=st.integers(0, 10**6), eta=st.floats(0, 2),
       grid=st.booleans(), flip=st.booleans(), shift=st.integers(0, 2))
def test_augment_is_label_preserving_and_exact_length(n, seed, eta, grid, flip, shift):
    s = Sample(4, np.linspace(-1, 1, 6), 2)
    scheme = AugmentationScheme.grid_moves(flip, shift) if grid else AugmentationScheme.jitter(eta)
    out = augment(s, n, scheme, seed, grid=(2, 3) if grid else None)
    assert len(out) == n
    assert all(o.label == 2 and o.id == 4 and o.features.shape == (6,) for o in out)
    again = augment(s, n, scheme, seed, grid=(2, 3) if grid else None)
    assert all(np.array_equal(a.features, b.features) for a, b in zip(out, again))


def test_half_split_counts():
    assert random_half_split(4, 0).sum() == 2
    assert random_half_split(5, 0).sum() == 2
    with pytest.raises(ArgumentError):
        random_half_split(1, 0)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(2, 10_000), seed=st.integers(0, 2**32 - 1))
def test_half_split_popcount(n, seed):
    m = random_half_split(n, seed)
    assert m.shape == (n,) and m.sum() == n // 2


def test_half_split_membership_frequency():
    freq = np.mean([random_half_split(20, s) for s in range(1000)], axis=0)
    assert np.all((freq >= 0.45) & (freq <= 0.55))
