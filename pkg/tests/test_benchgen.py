import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from femlab import benchgen as bg
from femlab.eval import default_data_path


def test_anticorr_geometry():
    truth = bg.anticorr_truth(5, 3, 2.0, 0.4)
    c1 = truth.classes[1]
    assert len(c1.weights) == 2
    np.testing.assert_allclose(c1.means[0], -c1.means[1])
    for m in c1.means:
        assert np.linalg.norm(m) == pytest.approx(2 * math.sqrt(5))
        assert set(np.abs(m)) == {2.0}
    np.testing.assert_allclose(truth.classes[0].means[0], -2 * np.ones(5))
    np.testing.assert_allclose(truth.classes[2].means[0], 2 * np.ones(5))


@pytest.mark.parametrize("D,K", [(2, 3), (5, 3), (5, 7), (10, 3), (3, 5)])
def test_midpoint_truth_exactly_uniform(D, K):
    truth = bg.anticorr_truth(D, K, 1.5, 0.4)
    np.testing.assert_allclose(bg.true_posterior(truth, np.zeros(D)), np.full(K, 1 / K), atol=1e-12)


def test_sign_patterns_limits():
    assert bg.sign_patterns(2, 1).tolist() == [[1.0, -1.0]]
    with pytest.raises(ValueError):
        bg.sign_patterns(2, 2)


def test_posterior_at_single_mode_is_confident():
    truth = bg.anticorr_truth(5, 3, 2.0, 0.4)
    p = bg.true_posterior(truth, 2 * np.ones(5))
    assert p[2] > 0.999
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_labels_roughly_uniform():
    data, _ = bg.gen_anticorr_bimodal(bg.SyntheticSpec(n_train=30000, seed=42))
    counts = np.bincount(data.labels, minlength=3)
    chi2 = np.sum((counts - 10000) ** 2 / 10000)
    assert chi2 < 13.8  # 99.9% quantile, 2 dof


def test_generators_deterministic():
    spec = bg.SyntheticSpec(n_train=500, seed=7)
    a, _ = bg.gen_anticorr_bimodal(spec)
    b, _ = bg.gen_anticorr_bimodal(spec)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.labels, b.labels)
    c, _ = bg.gen_anticorr_bimodal(bg.SyntheticSpec(n_train=500, seed=8))
    assert not np.array_equal(a.y, c.y)


def test_spec_validation():
    with pytest.raises(ValueError):
        bg.SyntheticSpec(D=0)
    with pytest.raises(ValueError):
        bg.SyntheticSpec(K_X=2)
    with pytest.raises(ValueError):
        bg.SyntheticSpec(layout="nope")


def test_true_posterior_against_scipy_oracle():
    truth = bg.anticorr_truth(3, 4, 1.5, 0.5)
    y = np.random.default_rng(0).normal(size=(10, 3))
    lik = np.zeros((10, 4))
    for k, mix in enumerate(truth.classes):
        for w, m, s in zip(mix.weights, mix.means, mix.stds):
            lik[:, k] += w * multivariate_normal(m, s ** 2 * np.eye(3)).pdf(y)
    expected = lik / lik.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(bg.true_posterior(truth, y), expected, atol=1e-12)


# --- multi-leaf ----------------------------------------------------------------

def test_multileaf_zero_evidence_uniform_for_all_subsets():
    leaves, truth = bg.gen_multileaf(bg.SyntheticSpec(D=2, n_train=100), 3)
    for n in (1, 2, 3):
        p = bg.true_posterior_multi(truth, [np.zeros(2)] * n)
        np.testing.assert_allclose(p, np.full(3, 1 / 3), atol=1e-12)


def test_multileaf_is_product_of_likelihoods():
    _, truth = bg.gen_multileaf(bg.SyntheticSpec(D=2, n_train=100), 3)
    rng = np.random.default_rng(1)
    ys = [rng.normal(size=2) for _ in range(3)]
    lik = np.prod([np.exp(truth.log_likelihood(y)[0]) for y in ys], axis=0)
    np.testing.assert_allclose(bg.true_posterior_multi(truth, ys), lik / lik.sum(), atol=1e-12)


def test_multileaf_conditional_independence():
    leaves, _ = bg.gen_multileaf(bg.SyntheticSpec(D=2, n_train=30000, seed=3), 3)
    sel = leaves[0].labels == 0
    c = np.corrcoef(leaves[0].y[sel, 0], leaves[1].y[sel, 0])[0, 1]
    assert abs(c) < 0.05


# --- confounder ----------------------------------------------------------------

def _two_term_truth(base, delta, y1, y2):
    """Enumerate Z directly: sum_z p(z) p(y1|k,z) p(y2|k,z)."""
    post = []
    for mix in base.classes:
        tot = 0.0
        for z in (0, 1):
            l1 = math.exp(mix.log_pdf(y1 - z * delta)[0])
            l2 = math.exp(mix.log_pdf(y2 - z * delta)[0])
            tot += 0.5 * l1 * l2
        post.append(tot)
    post = np.array(post) * base.prior
    return post / post.sum()


def test_confounded_truth_matches_z_enumeration():
    spec = bg.SyntheticSpec(D=2, n_train=200, layout="confounded")
    data, joint, marg = bg.gen_confounded(spec)
    base = bg.ladder_truth(2, 3, 2.0, 0.4)
    for q in bg.anti_aligned_queries(base, data.delta):
        got = bg.true_posterior(joint, q)
        np.testing.assert_allclose(got, _two_term_truth(base, data.delta, q[:2], q[2:]), atol=1e-12)


def test_confounder_breaks_product():
    spec = bg.SyntheticSpec(D=2, n_train=200, layout="confounded")
    data, joint, marg = bg.gen_confounded(spec)
    base = bg.ladder_truth(2, 3, 2.0, 0.4)
    q = bg.anti_aligned_queries(base, data.delta)[0]
    prod = bg.true_posterior_multi(marg, [q[:2], q[2:]])
    assert 0.5 * np.abs(prod - bg.true_posterior(joint, q)).sum() > 0.1


def test_zero_delta_product_is_exact():
    spec = bg.SyntheticSpec(D=2, n_train=200, layout="confounded")
    _, joint, marg = bg.gen_confounded(spec, delta=0.0)
    q = np.random.default_rng(0).normal(size=(5, 4))
    prod = bg.true_posterior_multi(marg, [q[:, :2], q[:, 2:]])
    np.testing.assert_allclose(prod, bg.true_posterior(joint, q), atol=1e-12)


def test_confounded_data_shift():
    data, _, _ = bg.gen_confounded(bg.SyntheticSpec(D=2, n_train=20000, seed=1, layout="confounded"))
    for leaf in (data.y1, data.y2):
        diff = leaf[data.z == 1].mean(axis=0) - leaf[data.z == 0].mean(axis=0)
        np.testing.assert_allclose(diff, data.delta, atol=0.05)
    assert data.joint.y.shape == (20000, 4)


# --- high-cardinality parents ----------------------------------------------------

def test_highcard_samples_per_config():
    data, truth = bg.gen_highcard_parents(8, 3, 30000, seed=42)
    assert truth.n_configs == 6561
    assert 30000 / truth.n_configs == pytest.approx(4.6, abs=0.05)
    assert data.labels.shape == (30000, 8)


def test_highcard_linearity():
    _, truth = bg.gen_highcard_parents(3, 3, 10, seed=0)
    a, b = np.array([0, 1, 2]), np.array([0, 2, 2])
    diff = truth.means(b)[0] - truth.means(a)[0]
    np.testing.assert_allclose(diff, truth.W[:, 1, 2] - truth.W[:, 1, 1], atol=1e-12)


def test_highcard_posterior_bruteforce():
    _, truth = bg.gen_highcard_parents(3, 3, 10, seed=1)
    configs = truth.all_configs()
    y = truth.means(configs[5:6])
    lik = np.array([multivariate_normal(truth.means(c[None])[0], truth.sigma_y ** 2 * np.eye(5)).pdf(y[0])
                    for c in configs])
    np.testing.assert_allclose(truth.posterior(y)[0], lik / lik.sum(), atol=1e-10)
    assert truth.posterior(y)[0].argmax() == 5
    assert np.array_equal(bg.config_index(configs, 3), np.arange(27))


def test_highcard_overflow_guard():
    with pytest.raises(OverflowError):
        bg.gen_highcard_parents(40, 3, 10, seed=0)


# --- low rank -------------------------------------------------------------------

def test_lowrank_structure():
    data, truth = bg.gen_lowrank(8, 2, bg.SyntheticSpec(D=2, n_train=20000, seed=0, layout="low-rank"))
    np.testing.assert_allclose(data.Q.T @ data.Q, np.eye(2), atol=1e-10)
    ev = np.sort(np.linalg.eigvalsh(np.cov(data.dataset.y.T)))[::-1]
    assert ev[1] / ev[2] >= 50
    np.testing.assert_allclose(bg.true_posterior(truth, np.zeros(8)), np.full(3, 1 / 3), atol=1e-12)


# --- tabular ------------------------------------------------------------------------

def test_breast_cancer_split():
    split = bg.load_tabular(default_data_path("breast_cancer"))
    assert len(split.y_train) + len(split.y_test) == 569
    assert split.n_features == 30
    assert len(split.classes) == 2
    np.testing.assert_allclose(split.X_train.mean(axis=0), 0, atol=1e-10)
    np.testing.assert_allclose(split.X_train.std(axis=0), 1, atol=1e-10)
    for c in range(2):
        n_c = np.sum(split.y_train == c) + np.sum(split.y_test == c)
        assert abs(np.sum(split.y_test == c) - 0.2 * n_c) <= 1


def test_split_is_deterministic():
    a = bg.load_tabular(default_data_path("iris"))
    b = bg.load_tabular(default_data_path("iris"))
    assert np.array_equal(a.X_test, b.X_test)


def test_read_delimited_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,label\n1,2,0\n1,x,1\n")
    with pytest.raises(ValueError, match="non-numeric"):
        bg.read_delimited(p, "label")
    p.write_text("a,b,label\n1,2\n")
    with pytest.raises(ValueError, match="expected 3 fields"):
        bg.read_delimited(p, "label")
    with pytest.raises(ValueError, match="label column"):
        bg.read_delimited(p, "target")
    p.write_text("a,label\n1,0\n2,0\n3,1\n")
    with pytest.raises(ValueError, match="fewer than 2"):
        bg.load_tabular(p)


def test_string_labels_and_delimiter(tmp_path):
    p = tmp_path / "t.tsv"
    rows = ["x\ty\tcls"] + [f"{i}\t{i % 3}\t{'ab'[i % 2]}" for i in range(20)]
    p.write_text("\n".join(rows) + "\n")
    X, labels, feats = bg.read_delimited(p, "cls", delimiter="\t")
    assert X.shape == (20, 2) and feats == ["x", "y"] and set(labels) == {"a", "b"}
