import numpy as np
import pytest
from scipy import stats

from ldlab.rng import path_normals, philox_block, split_seed


# Published Philox4x32-10 known-answer vectors (Random123 kat_vectors)
KAT = [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
     (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
]


@pytest.mark.parametrize("counter,key,expected", KAT)
def test_philox_known_answers(counter, key, expected):
    assert philox_block(counter, key) == expected


def test_split_seed_roundtrip():
    k0, k1 = split_seed(0x0123456789ABCDEF)
    assert int(k0) == 0x89ABCDEF and int(k1) == 0x01234567
    with pytest.raises(ValueError):
        split_seed(-1)
    with pytest.raises(ValueError):
        split_seed(2**64)


def test_streams_are_pure_functions_of_coordinates():
    a = path_normals(11, 5, np.arange(20), 2)
    b = path_normals(11, 5, np.arange(20), 2)
    np.testing.assert_array_equal(a, b)
    # a single step can be drawn out of order
    np.testing.assert_array_equal(path_normals(11, 5, [7], 2)[0], a[7])
    assert not np.array_equal(a, path_normals(11, 6, np.arange(20), 2))
    assert not np.array_equal(a, path_normals(12, 5, np.arange(20), 2))


def test_normals_are_standard_gaussian():
    z = np.concatenate([path_normals(3, p, np.arange(500), 2).ravel() for p in range(40)])
    assert abs(z.mean()) < 0.02
    assert abs(z.std() - 1) < 0.02
    assert stats.kstest(z, "norm").pvalue > 1e-3
    # the two coordinates of a step are uncorrelated
    w = path_normals(3, 0, np.arange(20000), 2)
    assert abs(np.corrcoef(w.T)[0, 1]) < 0.03


def test_normals_per_step_limits():
    with pytest.raises(ValueError):
        path_normals(1, 0, [0], 4)
