import os
import subprocess
import sys

import numpy as np
import pytest

from sqdisk import _accel, kernels

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")

TAG = np.uint64(1 << 48)


def random_table(rng, n=512, max_tag=8):
    alloc = rng.random(n) < 0.6
    offs = rng.integers(1, 1 << 20, n).astype(np.uint64) << np.uint64(16)
    tags = rng.integers(0, max_tag, n).astype(np.uint64) << np.uint64(48)
    return np.where(alloc, offs | tags, np.uint64(0)).astype(np.uint64)


@pytest.mark.parametrize("seed", range(20))
def test_correct_slice_paths_agree(seed):
    rng = np.random.default_rng(seed)
    sv, sb = random_table(rng), random_table(rng)
    a, b = sv.copy(), sv.copy()
    na = kernels.np_correct_slice(a, sb, 6, 3)
    nb = kernels.nb_correct_slice(b, sb, 6, 3)
    assert na == nb
    assert np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(10))
def test_table_kernels_agree(seed):
    rng = np.random.default_rng(seed)
    t, view = random_table(rng), random_table(rng)
    for np_fn, nb_fn, args in [
        (kernels.np_merge_view, kernels.nb_merge_view, (t, 4)),
        (kernels.np_stamp_unindexed, kernels.nb_stamp_unindexed, (4,)),
        (kernels.np_strip_foreign, kernels.nb_strip_foreign, (4,)),
    ]:
        a, b = view.copy(), view.copy()
        np_fn(a, *args)
        nb_fn(b, *args)
        assert np.array_equal(a, b), np_fn.__name__
    merged = random_table(rng)
    a, b = t.copy(), t.copy()
    kernels.np_remap_stream(a, merged, 2, 4)
    kernels.nb_remap_stream(b, merged, 2, 4)
    assert np.array_equal(a, b)
    assert kernels.np_count_allocated(t) == kernels.nb_count_allocated(t)


def test_payload_paths_agree():
    base = np.uint64(0x1234_5678_9ABC_DEF0)
    assert np.array_equal(kernels.np_payload_words(base, 8192), kernels.nb_payload_words(base, 8192))


def test_payload_deterministic_and_distinct():
    a = kernels.payload(7, 3, 1, 65536)
    assert a == kernels.payload(7, 3, 1, 65536)
    assert a != kernels.payload(7, 3, 2, 65536)
    assert a != kernels.payload(8, 3, 1, 65536)
    assert len(a) == 65536


def test_correct_rule_examples():
    sv = np.array([2 << 48 | 0x10000, 7 << 48 | 0x20000, 0, 5 << 48 | 0x30000], dtype=np.uint64)
    sb = np.array([5 << 48 | 0x40000, 5 << 48 | 0x50000, 5 << 48 | 0x60000, 0], dtype=np.uint64)
    for fn in (kernels.np_correct_slice, kernels.nb_correct_slice):
        s = sv.copy()
        changed = fn(s, sb, 8, 6)
        assert int(s[0]) == 5 << 48 | 0x40000  # 2 <= 5: replaced
        assert int(s[1]) == 7 << 48 | 0x20000  # 7 > 5: kept
        assert int(s[2]) == 5 << 48 | 0x60000  # empty slot filled
        assert int(s[3]) == 5 << 48 | 0x30000  # backing empty: kept
        assert changed == 2


def test_env_flag_selects_numpy_path():
    env = dict(os.environ, SQDISK_NUMBA="0")
    code = "from sqdisk import _accel, kernels; print(_accel.USE_NUMBA, kernels.correct_slice.__name__)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "np_correct_slice"]


def test_engines_run_on_numpy_path(tmp_path):
    env = dict(os.environ, SQDISK_NUMBA="0")
    code = (
        "import sys; from sqdisk.bench import ChainSpec, genchain, content_hash;"
        "from sqdisk.chainstore import open_chain;"
        "p = genchain(ChainSpec(size=4 << 20, length=3, fill_pct=60, seed=2, mode='scalable'), sys.argv[1]);"
        "print(content_hash(open_chain(p)))"
    )
    a = subprocess.run([sys.executable, "-c", code, str(tmp_path / "np")], env=env,
                       capture_output=True, text=True, check=True).stdout
    env["SQDISK_NUMBA"] = "1"
    b = subprocess.run([sys.executable, "-c", code, str(tmp_path / "nb")], env=env,
                       capture_output=True, text=True, check=True).stdout
    assert a == b and len(a.strip()) == 64
