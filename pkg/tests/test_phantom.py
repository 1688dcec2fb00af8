import numpy as np
import pytest
from scipy import ndimage

from multirecon.errors import ParameterError
from multirecon.phantom import CC_CLASS, PhantomParams, cohort_params, generate_phantom, make_cohort

# frozen on first run; a change here means the generator's output moved
FROZEN_COUNTS = [27472, 1808, 1279, 1898, 69, 154, 46, 42]
FROZEN_SUM = 3511.6775062345623


def test_frozen_reference(small_phantom):
    v, l = small_phantom
    assert np.bincount(l.labels.ravel(), minlength=8).tolist() == FROZEN_COUNTS
    assert float(v.data.sum()) == pytest.approx(FROZEN_SUM, rel=1e-12)


def test_deterministic():
    p = PhantomParams(ga=25.0, seed=9, dims=(24, 24, 24))
    a, b = generate_phantom(p), generate_phantom(p)
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].labels, b[1].labels)


def test_brain_grows_with_ga():
    small = generate_phantom(PhantomParams(ga=21.0, seed=5, dims=(32, 32, 32)))[1]
    big = generate_phantom(PhantomParams(ga=35.0, seed=5, dims=(32, 32, 32)))[1]
    assert (big.labels != 0).sum() > (small.labels != 0).sum()


def test_class_counts_monotone_in_ga():
    prev = None
    for ga in np.linspace(21, 35, 10):
        l = generate_phantom(PhantomParams(ga=float(ga), seed=2, dims=(32, 32, 32)))[1]
        counts = np.bincount(l.labels.ravel(), minlength=8)[1:]
        if prev is not None:
            assert np.all(counts >= prev)
        prev = counts


def test_noise_free_limit():
    intens = {c: (0.1 * c, 0.0) for c in range(1, 9)}
    v, l = generate_phantom(PhantomParams(dims=(24, 24, 24), class_intensities=intens, bias_amplitude=0.0))
    for c in l.classes() - {0}:
        assert np.all(v.data[l.labels == c] == 0.1 * c)
    assert np.all(v.data[l.labels == 0] == 0)


@pytest.mark.parametrize("ga,seed", [(21.0, 0), (28.0, 11), (35.0, 4)])
def test_csf_is_outer_shell(ga, seed):
    l = generate_phantom(PhantomParams(ga=ga, seed=seed, dims=(32, 32, 32)))[1].labels
    brain = l != 0
    near_bg = ndimage.binary_dilation(~brain, ndimage.generate_binary_structure(3, 1)) & brain
    assert np.all(l[near_bg] == 1)


def test_corpus_callosum_inside_wm():
    l = generate_phantom(PhantomParams(dims=(32, 32, 32), with_cc=True))[1]
    assert l.max_class == CC_CLASS
    assert CC_CLASS in l.classes()


def test_cohort_shape():
    params = cohort_params(40, (21, 35), seed=1, template=PhantomParams(dims=(8, 8, 8)))
    gas = [p.ga for p in params]
    assert len(params) == 40 and min(gas) == 21 and max(gas) == 35
    assert len({p.seed for p in params}) == 40
    assert cohort_params(1, (21, 35))[0].ga == 28


def test_cohort_deterministic():
    t = PhantomParams(dims=(16, 16, 16))
    a, b = make_cohort(3, seed=4, template=t), make_cohort(3, seed=4, template=t)
    for (va, la, ga), (vb, lb, gb) in zip(a, b):
        assert ga == gb and np.array_equal(va.data, vb.data) and np.array_equal(la.labels, lb.labels)


def test_invalid_parameters():
    with pytest.raises(ParameterError):
        generate_phantom(PhantomParams(ga=40.0))
    with pytest.raises(ParameterError):
        cohort_params(0)
