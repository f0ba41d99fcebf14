"""Counter-based random streams.

Every normal variate used by the simulator is a pure function of
``(master_seed, path_index, step_index, tag)``.  The block cipher is
Philox4x32-10; a 64-bit master seed is the cipher key and the remaining
coordinates form the 128-bit counter::

    counter = (step_lo, step_hi[0:24] | tag << 24, path_lo, path_hi)

so paths never share a stream and the result of a path does not depend on
which worker simulated it or in what order.
"""

import math

import numba as nb
import numpy as np

# stream tags: 0 carries the Gaussian increments, 64.. their rejection
# fallbacks, and two more tags feed the bridge tests
TAG_NOISE = 0
TAG_EXIT_BRIDGE = 250
TAG_HIT_BRIDGE = 251

_U32_SCALE = 2.0 ** -32


@nb.njit(inline="always")
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Philox4x32 with 10 rounds; all arguments are ``np.uint32``."""
    for _ in range(10):
        p0 = np.uint64(0xD2511F53) * np.uint64(c0)
        p1 = np.uint64(0xCD9E8D57) * np.uint64(c2)
        hi0 = np.uint32(p0 >> np.uint64(32))
        lo0 = np.uint32(p0 & np.uint64(0xFFFFFFFF))
        hi1 = np.uint32(p1 >> np.uint64(32))
        lo1 = np.uint32(p1 & np.uint64(0xFFFFFFFF))
        c0, c1, c2, c3 = (np.uint32(hi1 ^ c1 ^ k0), lo1,
                          np.uint32(hi0 ^ c3 ^ k1), lo0)
        k0 = np.uint32(k0 + np.uint32(0x9E3779B9))
        k1 = np.uint32(k1 + np.uint32(0xBB67AE85))
    return c0, c1, c2, c3


@nb.njit(inline="always")
def _u01(v):
    # open interval (0, 1); never 0 so log() is safe
    return (np.float64(v) + 0.5) * _U32_SCALE


@nb.njit(inline="always")
def _block(key0, key1, path, step, tag):
    c0 = np.uint32(step & np.uint64(0xFFFFFFFF))
    c1 = np.uint32(((step >> np.uint64(32)) & np.uint64(0xFFFFFF)) | (np.uint64(tag) << np.uint64(24)))
    c2 = np.uint32(path & np.uint64(0xFFFFFFFF))
    c3 = np.uint32(path >> np.uint64(32))
    return philox4x32(c0, c1, c2, c3, key0, key1)


@nb.njit
def uniform(key0, key1, path, step, tag):
    """One U(0,1) variate for ``(path, step, tag)``."""
    r0, _, _, _ = _block(key0, key1, np.uint64(path), np.uint64(step), tag)
    return _u01(r0)


def _ziggurat_tables():
    # 128-layer ziggurat for the standard normal, values scaled for 25-bit
    # signed integers (the low 7 bits of each word pick the layer)
    m1 = 2.0**24
    dn = 3.442619855899
    tn = dn
    vn = 9.91256303526217e-3
    kn = np.zeros(128, dtype=np.int64)
    wn = np.zeros(128)
    fn = np.zeros(128)
    q = vn / math.exp(-0.5 * dn * dn)
    kn[0] = int((dn / q) * m1)
    kn[1] = 0
    wn[0] = q / m1
    wn[127] = dn / m1
    fn[0] = 1.0
    fn[127] = math.exp(-0.5 * dn * dn)
    for i in range(126, 0, -1):
        dn = math.sqrt(-2.0 * math.log(vn / dn + math.exp(-0.5 * dn * dn)))
        kn[i + 1] = int((dn / tn) * m1)
        tn = dn
        fn[i] = math.exp(-0.5 * dn * dn)
        wn[i] = dn / m1
    return kn, wn, fn


_KN, _WN, _FN = _ziggurat_tables()
_ZIG_R = 3.442619855899
_FALLBACK_TAG = 64  # tags 64.. feed ziggurat rejections, 16 per normal


@nb.njit(inline="always")
def _split(w):
    hz = np.int64(np.int32(w)) >> 7
    iz = np.int64(w & np.uint32(127))
    return hz, iz


@nb.njit
def _zig_slow(hz, iz, key0, key1, path, step, slot):
    # rejection branch; consumes words from this normal's private fallback tags
    tag = _FALLBACK_TAG + 16 * slot
    r0, r1, r2, r3 = _block(key0, key1, np.uint64(path), np.uint64(step), tag)
    pos = 0
    for _ in range(256):
        x = hz * _WN[iz]
        if pos > 2:
            tag += 1
            r0, r1, r2, r3 = _block(key0, key1, np.uint64(path), np.uint64(step), tag)
            pos = 0
        if iz == 0:
            # tail beyond the last layer (Marsaglia's method)
            while True:
                if pos > 2:
                    tag += 1
                    r0, r1, r2, r3 = _block(key0, key1, np.uint64(path), np.uint64(step), tag)
                    pos = 0
                ua = _u01(r0 if pos == 0 else r1 if pos == 1 else r2)
                ub = _u01(r1 if pos == 0 else r2 if pos == 1 else r3)
                pos += 2
                xt = -math.log(ua) / _ZIG_R
                yt = -math.log(ub)
                if yt + yt >= xt * xt:
                    break
            return _ZIG_R + xt if hz > 0 else -_ZIG_R - xt
        u = _u01(r0 if pos == 0 else r1 if pos == 1 else r2)
        w = r1 if pos == 0 else r2 if pos == 1 else r3
        pos += 2
        if _FN[iz] + u * (_FN[iz - 1] - _FN[iz]) < math.exp(-0.5 * x * x):
            return x
        hz, iz = _split(w)
        if abs(hz) < _KN[iz]:
            return hz * _WN[iz]
    return 0.0


@nb.njit(inline="always")
def _zig(w, key0, key1, path, step, slot):
    hz, iz = _split(w)
    if abs(hz) < _KN[iz]:
        return hz * _WN[iz]
    return _zig_slow(hz, iz, key0, key1, path, step, slot)


@nb.njit(inline="always")
def fill_normals(key0, key1, path, step, out):
    """Fill ``out`` (length <= 3) with standard normals for ``(path, step)``.

    One cipher block holds four words; each normal takes one word through a
    ziggurat sampler.  Returns ``(w2, w3, spare)``: when ``len(out) <= 2``
    the last two words are unused and handed back for uniforms.
    """
    n = out.shape[0]
    r0, r1, r2, r3 = _block(key0, key1, np.uint64(path), np.uint64(step), 0)
    out[0] = _zig(r0, key0, key1, path, step, 0)
    if n > 1:
        out[1] = _zig(r1, key0, key1, path, step, 1)
    if n > 2:
        out[2] = _zig(r2, key0, key1, path, step, 2)
    return r2, r3, n <= 2


@nb.njit(inline="always")
def word_to_uniform(w):
    return _u01(w)


def split_seed(seed):
    """Split a 64-bit master seed into the two 32-bit Philox key words."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"master seed must fit in 64 bits, got {seed}")
    return np.uint32(seed & 0xFFFFFFFF), np.uint32(seed >> 32)


def philox_block(counter, key):
    """Python-level access to one cipher block (used for known-answer tests)."""
    c = [np.uint32(v) for v in counter]
    k = [np.uint32(v) for v in key]
    return tuple(int(v) for v in _philox_py(c[0], c[1], c[2], c[3], k[0], k[1]))


@nb.njit
def _philox_py(c0, c1, c2, c3, k0, k1):
    return philox4x32(c0, c1, c2, c3, k0, k1)


@nb.njit
def _normals_batch(k0, k1, path, steps, n):
    out = np.empty((steps.shape[0], n))
    buf = np.empty(n)
    for i in range(steps.shape[0]):
        fill_normals(k0, k1, path, np.uint64(steps[i]), buf)
        out[i] = buf
    return out


def path_normals(seed, path, steps, n=2):
    """Normals a path sees at the given steps, shape ``(len(steps), n)``."""
    if not 1 <= n <= 3:
        raise ValueError("1 to 3 normals per step")
    k0, k1 = split_seed(seed)
    steps = np.atleast_1d(np.asarray(steps, dtype=np.uint64))
    return _normals_batch(k0, k1, np.uint64(path), steps, n)
