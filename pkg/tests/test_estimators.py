import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from lclipscore.distill import make_synthetic_teacher
from lclipscore.errors import ContractError
from lclipscore.estimators import CiderD, LCLIPDistiller, LCLIPScorer
from lclipscore.metric import l_clipscore
from lclipscore.ngram import build_idf, cider_d
from lclipscore.synthetic import generate_corpus


@pytest.fixture(scope="module")
def small():
    corpus = generate_corpus(32, noise=0.2, seed=1)
    teacher = make_synthetic_teacher(32, 1, corpus.world)
    caps = [corpus.token_ids(i) for i in range(len(corpus))]
    return corpus, teacher, caps


def distiller(teacher, **kw):
    return LCLIPDistiller(teacher, vision=(2, 1, 32, 4, 32, 8), text=(2, 1, 32, 4, 32, 12), rank=4,
                          stage1_epochs=1, stage1_batch=8, stage2_epochs=1, stage2_batch=4, **kw)


def test_params_round_trip_through_clone(small):
    est = distiller(small[1], seed=3)
    twin = clone(est)
    assert twin.get_params()["seed"] == 3
    assert type(twin.get_params()["teacher"]) is type(est.teacher)


def test_transform_before_fit(small):
    with pytest.raises(NotFittedError):
        distiller(small[1]).transform(small[0].images)


def test_fit_transform(small):
    corpus, teacher, caps = small
    est = distiller(teacher)
    Z = est.fit(corpus.images, caps).transform(corpus.images)
    assert Z.shape == (len(corpus), 32)
    assert_allclose(np.linalg.norm(Z, axis=1), 1.0, atol=1e-5)
    assert len(est.stage1_curve_) > 0 and len(est.stage2_curve_) > 0
    # the same seed reproduces the same embeddings
    assert_allclose(distiller(teacher).fit_transform(corpus.images, caps), Z, rtol=0, atol=0)


def test_fit_validation(small):
    corpus, teacher, caps = small
    with pytest.raises(ContractError):
        distiller(teacher).fit(corpus.images, caps[:-1])
    with pytest.raises(ContractError):
        distiller(teacher).fit(corpus.images[:, 0], caps)
    with pytest.raises(ValueError):
        bad = corpus.images.copy()
        bad[0, 0, 0] = np.nan
        distiller(teacher).fit(bad, caps)
    with pytest.raises(ContractError):
        distiller(None).fit(corpus.images, caps)


def test_scorer_matches_metric(small):
    corpus, teacher, _ = small
    feats = {corpus.image_key(i): corpus.images[i] for i in range(4)}
    recs = [{"id": i, "image": corpus.image_key(i), "candidate": corpus.captions[i]} for i in range(4)]
    recs.append({"id": 9, "image": "missing", "candidate": corpus.captions[0]})
    est = LCLIPScorer(teacher, teacher.tokenizer).fit(feats)
    got = est.predict(recs)
    with torch.no_grad():
        v0, _ = teacher.encode_image(torch.as_tensor(corpus.images[0], dtype=torch.float64))
        u0, _ = teacher.encode_text(corpus.token_ids(0))
    assert_allclose(got[0], l_clipscore(v0.numpy().ravel(), u0.numpy().ravel()), atol=1e-12)
    assert np.isnan(got[-1]) and len(est.failures_) == 1
    with pytest.raises(NotFittedError):
        LCLIPScorer(teacher, teacher.tokenizer).predict(recs)
    with pytest.raises(ContractError):
        LCLIPScorer().fit(feats)


def test_cider_estimator():
    refs = [["a b c d"], ["a b e f"]]
    est = CiderD().fit(refs)
    assert_allclose(est.predict(["a b c d", "a b"], refs), [cider_d("a b c d", refs[0], build_idf(refs)),
                                                             cider_d("a b", refs[1], build_idf(refs))])
    assert_allclose(est.predict(["a b c d"], refs[:1]), [10.0], atol=1e-12)
    with pytest.raises(NotFittedError):
        CiderD().predict(["a"], [["a"]])
    with pytest.raises(ContractError):
        est.predict(["a"], refs)
