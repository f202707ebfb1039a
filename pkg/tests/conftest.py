import numpy as np
import pytest

import milfool as mf
from milfool.model import ForwardTrace


@pytest.fixture(scope="session")
def digits_pool(tmp_path_factory):
    """Handwritten-digit image pool, round-tripped through the IDX file format.

    Returns (train_images, train_labels, test_images, test_labels) with pixel
    values in [0, 1]. The pool is split so train and test bags never share
    images.
    """
    from sklearn.datasets import load_digits

    digits = load_digits()
    raw = np.round(digits.images * 255.0 / 16.0).astype(np.uint8)
    perm = np.random.default_rng(123).permutation(len(raw))
    out = tmp_path_factory.mktemp("idx")
    splits = {}
    for name, idx in (("train", perm[:1200]), ("test", perm[1200:])):
        ipath, lpath = out / f"{name}-images.idx", out / f"{name}-labels.idx"
        mf.save_idx_images(ipath, lpath, raw[idx], digits.target[idx])
        splits[name] = mf.load_idx_images(ipath, lpath)
    return splits["train"] + splits["test"]


@pytest.fixture(scope="session")
def digits_sets(digits_pool):
    """Normalized 200-bag train / 100-bag test image-bag datasets (target class 9)."""
    tr_images, tr_labels, te_images, te_labels = digits_pool
    train_ds = mf.normalize(mf.build_image_bags(tr_images, tr_labels, mf.GenerationConfig(200, 5, 10, seed=11)))
    test_ds = mf.normalize(mf.build_image_bags(te_images, te_labels, mf.GenerationConfig(100, 5, 10, seed=12)))
    return train_ds, test_ds


@pytest.fixture(scope="session")
def digits_models(digits_sets):
    """Lazily trained full-protocol models on the digits bags, keyed by seed."""
    train_ds, _ = digits_sets
    cache = {}

    def get(seed: int) -> mf.AttentionMILModel:
        if seed not in cache:
            model = mf.init_model(train_ds.dimension, seed=seed)
            cache[seed], _ = mf.train(model, train_ds, epochs=50, learning_rate=0.0001, seed=seed)
        return cache[seed]

    return get


@pytest.fixture(scope="session")
def small_synth():
    cfg = mf.GenerationConfig(60, 3, 6, seed=5, dimension=8, cluster_separation=4.0)
    return mf.normalize(mf.generate_synthetic_dataset(cfg))


@pytest.fixture(scope="session")
def small_model(small_synth):
    model = mf.init_model(8, hidden=16, attention_dim=8, seed=2)
    trained, _ = mf.train(model, small_synth, epochs=30, learning_rate=0.001, seed=2)
    return trained


class MaxInstanceLinearScorer:
    """Two-class scorer with a known boundary, for attack optimality oracles.

    The bag score is the sigmoid of ``a . x_k + c`` where k is the instance
    maximizing ``a . x_j``. Adding one shared vector to every instance shifts
    all scores equally, so the argmax never changes and the minimal flipping
    perturbation is exactly |a . x_k + c| / ||a|| along +-a.
    """

    def __init__(self, a, c=0.0):
        self.a = np.asarray(a, dtype=np.float64)
        self.c = float(c)
        self.d = self.a.size

    def key_instance(self, x):
        return int(np.argmax(x @ self.a))

    def margin(self, x):
        return float(self.a @ x[self.key_instance(x)] + self.c)

    def forward(self, x):
        x = mf.data.as_instance_matrix(x)
        k = self.key_instance(x)
        p1 = 1.0 / (1.0 + np.exp(-(self.a @ x[k] + self.c)))
        attention = np.zeros(x.shape[0])
        attention[k] = 1.0
        probs = np.array([1.0 - p1, p1])
        return ForwardTrace(probs=probs, embedding=x[k].copy(), attention=attention, predicted=int(probs[1] > probs[0]))

    def input_gradient(self, x, class_c):
        x = mf.data.as_instance_matrix(x)
        k = self.key_instance(x)
        p1 = 1.0 / (1.0 + np.exp(-(self.a @ x[k] + self.c)))
        grad = np.zeros_like(x)
        grad[k] = (1.0 if class_c == 1 else -1.0) * p1 * (1.0 - p1) * self.a
        return grad


def make_margin_bag(rng, scorer: MaxInstanceLinearScorer, n: int, margin: float) -> np.ndarray:
    """Random bag whose key-instance logit margin is exactly ``margin``.

    A shared shift along the (unit) scorer direction moves every instance
    equally, so the key instance is preserved while its margin is pinned.
    """
    x = rng.normal(size=(n, scorer.d))
    return x + (margin - scorer.margin(x)) * scorer.a


def finite_difference_gradient(model, x, class_c, step=1e-5):
    """Central-difference oracle for input gradients."""
    grad = np.zeros_like(x)
    for j in range(x.shape[0]):
        for k in range(x.shape[1]):
            xp = x.copy()
            xp[j, k] += step
            xm = x.copy()
            xm[j, k] -= step
            grad[j, k] = (model.forward(xp).probs[class_c] - model.forward(xm).probs[class_c]) / (2.0 * step)
    return grad
