import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from gfp import tensorio
from gfp.errors import FormatError


@given(
    arrays=st.dictionaries(
        st.text(min_size=1, max_size=12),
        hnp.arrays(st.sampled_from([np.float64, np.float32, np.int64]), hnp.array_shapes(min_dims=0, max_dims=3, min_side=0)),
        max_size=4,
    ),
    note=st.text(max_size=20),
)
def test_round_trip_is_exact(arrays, note):
    tensors, header = tensorio.loads(tensorio.dumps(arrays, {"note": note}, tensorio.KIND_CHECKPOINT))
    assert header == {"note": note}
    assert list(tensors) == list(arrays)
    for k, v in arrays.items():
        assert tensors[k].dtype == v.dtype and tensors[k].shape == v.shape
        assert tensors[k].tobytes() == v.tobytes()


def blob():
    return tensorio.dumps({"w": np.arange(6.0).reshape(2, 3)}, {"a": 1}, tensorio.KIND_FEATURES)


def test_kind_is_checked():
    with pytest.raises(FormatError, match="kind"):
        tensorio.loads(blob(), tensorio.KIND_CHECKPOINT)


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"\0", "trailing"),
        (lambda b: b[:4] + b"\x09\x00" + b[6:], "version"),
    ],
)
def test_corruption_is_detected(mutate, match):
    with pytest.raises(FormatError, match=match):
        tensorio.loads(mutate(blob()))


def test_unsupported_dtype():
    with pytest.raises(FormatError):
        tensorio.dumps({"b": np.array([True])}, {}, tensorio.KIND_FEATURES)
