import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpfilter.fingerprint import (
    DBFormatError,
    FingerprintDB,
    MagSample,
    SyntheticField,
    build_db,
    calibration_scores,
    ccs_to_gcs,
    gcs_to_ccs,
    grid_nodes,
    labeled_queries,
    localize,
    match_probabilities,
    run_session,
)
from cpfilter.model import NoiseRegime, make_rng

angles = st.floats(-2 * math.pi, 2 * math.pi)


@pytest.fixture(scope="module")
def small_db():
    nodes = grid_nodes(3, 3, 3.0)
    field = SyntheticField.random((6.0, 6.0), seed=1)
    return build_db(field, nodes, make_rng(1, 21)), field


def test_rotation_examples():
    m = np.array([1.5, -2.0, 3.0])
    np.testing.assert_array_equal(ccs_to_gcs(MagSample(m)), m)
    np.testing.assert_allclose(ccs_to_gcs(MagSample([1, 0, 0], yaw=math.pi / 2)), [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(ccs_to_gcs(MagSample(m, roll=math.pi)), [1.5, 2.0, -3.0], atol=1e-15)


def test_pitch_example():
    np.testing.assert_allclose(ccs_to_gcs(MagSample([0, 0, 1], pitch=math.pi / 2)), [1, 0, 0], atol=1e-15)


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3), angles, angles, angles)
def test_rotation_isometry_and_inverse(m, r, p, y):
    g = ccs_to_gcs(MagSample(m, r, p, y))
    assert np.linalg.norm(g) == pytest.approx(np.linalg.norm(m), abs=1e-10)
    np.testing.assert_allclose(gcs_to_ccs(g, r, p, y), m, atol=1e-10)


def test_magsample_rejects_nonfinite_angles():
    with pytest.raises(ValueError):
        MagSample([1, 0, 0], roll=math.nan)


def test_match_exact_signature_wins():
    sig = np.array([[0.0, 0, 0], [5.0, 0, 0], [0, 5.0, 0]])
    db = FingerprintDB(np.arange(1, 4), grid_nodes(3, 1), sig, np.ones(3))
    p = match_probabilities(db, sig[2])
    assert np.argmax(p) == 2 and p[2] > p[0] and p[2] > p[1]
    assert p.sum() == pytest.approx(1.0, abs=1e-9)


def test_match_identical_signatures_uniform():
    db = FingerprintDB(np.arange(1, 5), grid_nodes(2, 2), np.ones((4, 3)), np.full(4, 2.0))
    np.testing.assert_allclose(match_probabilities(db, [3.0, 1.0, -2.0]), 0.25)


def test_match_closed_form_ratio():
    d, sigma = 1.3, 0.9
    sig = np.array([[d, 0, 0], [2 * d, 0, 0]])
    db = FingerprintDB(np.array([1, 2]), grid_nodes(2, 1), sig, np.full(2, sigma))
    p = match_probabilities(db, [0.0, 0.0, 0.0])
    assert p[0] / p[1] == pytest.approx(math.exp((4 * d * d - d * d) / (2 * sigma**2)))


def test_match_argmax_invariant_to_uniform_dispersion_scaling(small_db):
    db, _ = small_db
    q = db.signatures[4] + 0.3
    scaled = FingerprintDB(db.node_ids, db.locations, db.signatures, db.dispersions * 0 + 7.0)
    scaled2 = FingerprintDB(db.node_ids, db.locations, db.signatures, db.dispersions * 0 + 0.5)
    assert np.argmax(match_probabilities(scaled, q)) == np.argmax(match_probabilities(scaled2, q))


def test_db_invariants():
    with pytest.raises(ValueError):
        FingerprintDB(np.array([1]), np.zeros((1, 2)), np.zeros((1, 3)), np.ones(1))
    with pytest.raises(ValueError):
        FingerprintDB(np.array([1, 2]), np.zeros((2, 2)), np.zeros((2, 3)), np.ones(2))
    with pytest.raises(ValueError):
        FingerprintDB(np.array([1, 2]), grid_nodes(2, 1), np.zeros((2, 3)), np.array([1.0, 0.0]))


def test_db_csv_round_trip(tmp_path, small_db):
    db, _ = small_db
    path = tmp_path / "db.csv"
    db.to_csv(path, ["seed: 1"])
    assert path.read_text().startswith("# seed: 1\nnode_id,x_m,y_m,sig_x,sig_y,sig_z,dispersion\n")
    back = FingerprintDB.from_csv(path)
    np.testing.assert_array_equal(back.node_ids, db.node_ids)
    np.testing.assert_array_equal(back.signatures, db.signatures)
    np.testing.assert_array_equal(back.dispersions, db.dispersions)


def test_db_csv_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        FingerprintDB.from_csv(tmp_path / "missing.csv")
    head = "node_id,x_m,y_m,sig_x,sig_y,sig_z,dispersion\n"
    bad = tmp_path / "bad.csv"
    bad.write_text(head + "1,0,0,1,2,3\n2,3,0,1,2,3,1\n")
    with pytest.raises(DBFormatError, match="columns"):
        FingerprintDB.from_csv(bad)
    bad.write_text(head + "1,0,0,1,2,x,1\n2,3,0,1,2,3,1\n")
    with pytest.raises(DBFormatError):
        FingerprintDB.from_csv(bad)
    bad.write_text("a,b\n")
    with pytest.raises(DBFormatError):
        FingerprintDB.from_csv(bad)


def test_grid_nodes():
    g = grid_nodes(4, 4, 3.0)
    assert g.shape == (16, 2)
    assert len({tuple(p) for p in g}) == 16
    assert g.max() == 9.0


def test_build_db_shapes(small_db):
    db, field = small_db
    assert len(db) == 9
    assert np.all(db.dispersions >= 1e-3)
    # signatures track the noiseless field
    np.testing.assert_allclose(db.signatures, field(db.locations), atol=1.5)


def test_synthetic_field_bump_count():
    with pytest.raises(ValueError):
        SyntheticField.random((9, 9), n_bumps=2)


def test_localize_alpha_tiny_gives_all_nodes(small_db):
    db, field = small_db
    q, y = labeled_queries(db, field, 50, make_rng(0, 5))
    scores = calibration_scores(db, q, y)
    loc = localize(db, q[0], scores, alpha=1e-9)
    assert loc.set == frozenset(range(1, 10))
    assert not loc.flagged


def test_localize_empty_calibration_flags(small_db):
    db, _ = small_db
    loc = localize(db, db.signatures[0], [], 0.1)
    assert loc.flagged and len(loc.set) == len(db)
    assert loc.point_estimate == 1


def test_separable_data_small_sets():
    sig = np.array([[0.0, 0, 0], [100.0, 0, 0], [0, 100.0, 0], [0, 0, 100.0]])
    db = FingerprintDB(np.arange(1, 5), grid_nodes(2, 2), sig, np.ones(4))
    rng = np.random.default_rng(3)
    labels = rng.integers(1, 5, 2000)
    queries = sig[labels - 1] + rng.normal(0, 1, (2000, 3))
    scores = calibration_scores(db, queries[:1000], labels[:1000])
    sizes, hits = [], []
    for q, y in zip(queries[1000:], labels[1000:]):
        loc = localize(db, q, scores, 0.05)
        sizes.append(len(loc.set))
        hits.append(int(y) in loc.set)
    assert np.mean(sizes) == pytest.approx(1.0, abs=0.01)
    assert np.mean(hits) >= 0.95


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_session_gating_sees_identical_readings(seed):
    nodes = grid_nodes(3, 3)
    field = SyntheticField.random((6, 6), seed=seed)
    db = build_db(field, nodes, make_rng(seed, 21))
    reg = NoiseRegime("C")
    a = run_session(db, field, seed, n_queries=5, contamination=reg, gate=False)
    b = run_session(db, field, seed, n_queries=5, contamination=reg, gate=True)
    np.testing.assert_array_equal(a.true_nodes, b.true_nodes)
