import numpy as np

from parallel import run_blocks
from streams import DriverStream, block_streams, tag_key


def test_same_id_replays_bit_for_bit():
    a = DriverStream(7, "flow", 3)
    b = DriverStream(7, "flow", 3)
    assert np.array_equal(a.normal(100), b.normal(100))
    c = DriverStream(7, "flow", 3)
    c.normal(100)
    assert np.array_equal(c.replay().normal(100), DriverStream(7, "flow", 3).normal(100))


def test_different_ids_differ():
    base = DriverStream(7, "flow", 0).uniform(1000)
    for other in (DriverStream(8, "flow", 0), DriverStream(7, "flux", 0), DriverStream(7, "flow", 1)):
        draws = other.uniform(1000)
        assert not np.array_equal(base, draws)
        assert abs(np.corrcoef(base, draws)[0, 1]) < 0.15


def test_children_depend_on_parent_index():
    a = DriverStream(1, "pop", 0).child("B")
    b = DriverStream(1, "pop", 1).child("B")
    assert a.tag != b.tag
    assert not np.array_equal(a.normal(5), b.normal(5))
    assert np.array_equal(DriverStream(1, "pop", 0).child("B").normal(5), DriverStream(1, "pop", 0).child("B").normal(5))


def test_tag_key_stable():
    assert tag_key("mean-field") == tag_key("mean-field")
    assert tag_key("a") != tag_key("b")
    assert 0 <= tag_key("x") < 2 ** 64


def test_block_split():
    blocks = block_streams(5, "t", 2500, 1000)
    assert [n for _, n in blocks] == [1000, 1000, 500]
    assert [s.index for s, _ in blocks] == [0, 1, 2]


def _block_sum(stream, n, scale):
    return scale * stream.normal(n).sum()


def test_run_blocks_independent_of_workers():
    one = run_blocks(_block_sum, 11, "sum", 3000, block_size=1000, workers=1, args=(2.0,))
    two = run_blocks(_block_sum, 11, "sum", 3000, block_size=1000, workers=2, args=(2.0,))
    assert one == two
    assert len(one) == 3
