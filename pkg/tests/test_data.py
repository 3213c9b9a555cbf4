import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fmeclf.data import (
    FunctionalDataset,
    SimConfig,
    correct_classification_rate,
    draw,
    dumps_dataset,
    load_dataset,
    loads_dataset,
    make_truth,
    save_dataset,
    simulate,
    split,
)
from fmeclf.exceptions import ConfigurationError, DataError


def small_dataset(n=10, T=6, G=2, seed=0):
    rng = np.random.default_rng(seed)
    return FunctionalDataset(np.linspace(0, 1, T), rng.normal(size=(n, T)), np.arange(n) % G + 1, G)


def test_load_two_rows():
    text = "label,0,0.5,1\n1,0.1,0.2,0.3\n2,1,2,3\n"
    ds = loads_dataset(text)
    assert ds.n == 2 and ds.G == 2
    np.testing.assert_array_equal(ds.grid, [0, 0.5, 1])
    np.testing.assert_array_equal(ds.curves[1], [1, 2, 3])


def test_ragged_row_names_row():
    with pytest.raises(DataError, match="row 3"):
        loads_dataset("label,0,0.5,1\n1,0.1,0.2,0.3\n2,1,2\n")


def test_non_numeric_cell_names_row_and_column():
    with pytest.raises(DataError, match="row 2, column 3"):
        loads_dataset("label,0,0.5,1\n1,0.1,abc,0.3\n")


def test_label_out_of_range():
    with pytest.raises(DataError, match="row 2"):
        loads_dataset("label,0,1\n4,0.1,0.2\n", G=3)
    with pytest.raises(DataError):
        loads_dataset("label,0,1\n0,0.1,0.2\n")


def test_duplicate_grid_rejected():
    with pytest.raises(DataError, match="duplicate"):
        loads_dataset("label,0,0.5,0.5\n1,1,2,3\n")


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "absent.csv")
    with pytest.raises(ConfigurationError):
        load_dataset(tmp_path / "absent.csv", format="parquet")


def test_wide_five_class_file(tmp_path):
    # the shape of a log-periodogram study: 256 samples per curve, 5 classes
    rng = np.random.default_rng(0)
    ds = FunctionalDataset(np.arange(1, 257, dtype=float), rng.normal(size=(1000, 256)), np.arange(1000) % 5 + 1, 5)
    save_dataset(ds, tmp_path / "ph.csv")
    back = load_dataset(tmp_path / "ph.csv")
    assert back.n == 1000 and back.G == 5 and back.curves.shape == (1000, 256)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 8), T=st.integers(2, 9))
def test_round_trip_value_identical(seed, n, T):
    rng = np.random.default_rng(seed)
    grid = np.sort(rng.uniform(-3, 3, T))
    if np.any(np.diff(grid) <= 0):
        return
    curves = rng.normal(size=(n, T)) * 10.0 ** rng.integers(-12, 12, size=(n, T))
    ds = FunctionalDataset(grid, curves, rng.integers(1, 4, n), 3)
    back = loads_dataset(dumps_dataset(ds), G=3)
    np.testing.assert_array_equal(back.grid, ds.grid)
    np.testing.assert_array_equal(back.curves, ds.curves)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_file_format_bytes(tmp_path):
    ds = FunctionalDataset(np.array([0.0, 0.25]), np.array([[1.5, -2.0]]), np.array([2]), 2)
    save_dataset(ds, tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_bytes() == b"label,0,0.25\n2,1.5,-2\n"


def test_dataset_validation():
    with pytest.raises(DataError):
        FunctionalDataset(np.array([0.0, 0.0]), np.zeros((1, 2)), np.array([1]), 2)
    with pytest.raises(DataError):
        FunctionalDataset(np.array([0.0, 1.0]), np.array([[np.nan, 0.0]]), np.array([1]), 2)
    with pytest.raises(DataError):
        FunctionalDataset(np.array([0.0, 1.0]), np.zeros((1, 2)), np.array([3]), 2)


# --- metrics and splitting -----------------------------------------------------


def test_ccr_examples():
    assert correct_classification_rate([1, 2, 3], [1, 2, 3]) == 1.0
    assert correct_classification_rate([2, 3, 1], [1, 2, 3]) == 0.0
    assert correct_classification_rate([1, 2, 3, 1], [1, 2, 1, 1]) == 0.75
    with pytest.raises(ValueError):
        correct_classification_rate([1, 2], [1])


def test_random_guessing_ccr():
    rng = np.random.default_rng(0)
    n, G = 6000, 3
    ccr = correct_classification_rate(rng.integers(1, G + 1, n), np.arange(n) % G + 1)
    assert abs(ccr - 1 / G) <= 3 * np.sqrt((1 / G) * (1 - 1 / G) / n)


def test_split_balanced_half():
    tr, te = split(small_dataset(10, G=2), 0.5, seed=3)
    assert tr.n == 5 and te.n == 5
    assert np.bincount(te.labels)[1:].tolist() == [3, 2] or np.bincount(te.labels)[1:].tolist() == [2, 3]


def test_split_deterministic_and_exhaustive():
    ds = small_dataset(37, G=3)
    a = split(ds, 0.3, seed=11)
    b = split(ds, 0.3, seed=11)
    np.testing.assert_array_equal(a[1].curves, b[1].curves)
    rows = np.vstack([a[0].curves, a[1].curves])
    assert rows.shape[0] == 37
    assert len({r.tobytes() for r in rows}) == 37


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), frac=st.floats(0.1, 0.9))
def test_split_stratification(seed, frac):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 80))
    labels = rng.integers(1, 4, n)
    ds = FunctionalDataset(np.linspace(0, 1, 3), rng.normal(size=(n, 3)), labels, 3)
    _, te = split(ds, frac, seed)
    for g in range(1, 4):
        expected = np.sum(labels == g) * te.n / n
        assert abs(np.sum(te.labels == g) - expected) <= 1.0 + 1e-9


def test_split_degenerate_fraction():
    with pytest.raises(ConfigurationError):
        split(small_dataset(4), 0.1, 0)
    with pytest.raises(ConfigurationError):
        split(small_dataset(4), 1.0, 0)


# --- generator -------------------------------------------------------------------


def test_simulate_deterministic():
    a = simulate(SimConfig(seed=5, n_train=40, n_test=20))
    b = simulate(SimConfig(seed=5, n_train=40, n_test=20))
    assert dumps_dataset(a[0]) == dumps_dataset(b[0])
    assert dumps_dataset(a[1]) == dumps_dataset(b[1])


def test_simulate_shape():
    tr, te, truth = simulate(SimConfig(n_train=30, n_test=12))
    assert tr.n == 30 and te.n == 12 and tr.G == 3
    assert tr.curves.shape == (30, 100)
    assert set(np.unique(tr.clusters)) <= {1, 2}
    np.testing.assert_allclose(tr.grid, np.linspace(0, 1, 100))
    assert truth.expert_weights.shape == (2, 2, 15)


def test_noiseless_saturated_limit():
    cfg = SimConfig(noise_var=1e-12, expert_scale=1e4, n_test=300, seed=2)
    _, te, truth = simulate(cfg)
    assert correct_classification_rate(truth.oracle_predict(te), te.labels) > 0.99


def test_cluster_frequencies_match_gating():
    cfg = SimConfig()
    truth = make_truth(cfg)
    ds, latent = draw(truth, 2000, np.linspace(0, 1, 100), np.random.default_rng(9))
    p1 = latent.gating_probs[:, 0]
    se = np.sqrt(np.sum(p1 * (1 - p1))) / ds.n
    assert abs(np.mean(ds.clusters == 1) - p1.mean()) <= 3 * se


def test_simulated_labels_follow_class_probs():
    truth = make_truth(SimConfig())
    ds, latent = draw(truth, 2000, np.linspace(0, 1, 100), np.random.default_rng(10))
    for g in range(3):
        p = latent.class_probs[:, g]
        se = np.sqrt(np.sum(p * (1 - p))) / ds.n
        assert abs(np.mean(ds.labels == g + 1) - p.mean()) <= 3 * se


def test_truth_document_fields():
    doc = make_truth(SimConfig()).to_dict()
    assert doc["generator"] == "fmeclf-sim"
    assert doc["alpha_nodes"] == [[0.0, -4.0], [0.5, 4.0], [1.0, -2.0]]
    assert doc["coef_var"] == 0.5


def test_simconfig_validation():
    with pytest.raises(ConfigurationError):
        SimConfig(noise_var=-1.0)
    with pytest.raises(ConfigurationError):
        SimConfig(noise_var=0.0)
    with pytest.raises(ConfigurationError):
        SimConfig(alpha_nodes=((0.0, 1.0), (2.0, 0.0)))


def test_bayes_classifier_ceiling_in_target_band():
    # true-parameter classifier over the 20 benchmark replicates at noise_var=1
    ccr = []
    for seed in range(20):
        _, test, truth = simulate(SimConfig(seed=seed))
        ccr.append(correct_classification_rate(truth.oracle_predict(test), test.labels))
    assert 0.93 <= np.mean(ccr) <= 0.97
