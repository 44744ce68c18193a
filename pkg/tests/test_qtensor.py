import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from bitbreaker.qtensor import (
    NF4_CODEBOOK,
    QuantError,
    QuantFormat,
    QuantizedTensor,
    default_flip_position,
    dequantize,
    flip_bit,
    flip_codes,
    flipped_dense,
    quantize,
)


def tensor(fmt, codes, scale=1.0):
    codes = np.asarray(codes)
    return QuantizedTensor(fmt, (1, codes.size), codes, scale)


class TestDequantize:
    def test_int8_zero(self):
        assert dequantize(tensor(QuantFormat.INT8, [0x00]), 0) == 0.0

    def test_int8_twos_complement(self):
        assert dequantize(tensor(QuantFormat.INT8, [0xFF], 0.5), 0) == -0.5

    def test_ternary_negative(self):
        assert dequantize(tensor(QuantFormat.TERNARY, [0b11], 2.0), 0) == -2.0

    def test_nf4_codebook_matches_oracle(self):
        assert list(NF4_CODEBOOK) == oracles.NF4_LEVELS
        assert np.all(np.diff(NF4_CODEBOOK) > 0)

    @pytest.mark.parametrize("fmt", list(QuantFormat))
    def test_every_code_matches_oracle(self, fmt):
        codes = [c for c in range(1 << fmt.width) if not (fmt is QuantFormat.TERNARY and c == 0b10)]
        t = tensor(fmt, codes, 0.25)
        got = [dequantize(t, i) for i in range(len(codes))]
        assert got == [0.25 * oracles.decode(fmt.value, c) for c in codes]

    @pytest.mark.parametrize("fmt", list(QuantFormat))
    def test_zero_code_is_zero(self, fmt):
        assert dequantize(tensor(fmt, [fmt.zero_code], 3.0), 0) == 0.0

    def test_dense_is_row_major_and_read_only(self):
        t = QuantizedTensor(QuantFormat.INT8, (2, 3), [1, 2, 3, 4, 5, 6], 1.0)
        assert t.dense().tolist() == [[1, 2, 3], [4, 5, 6]]
        with pytest.raises(ValueError):
            t.dense()[0, 0] = 9.0

    def test_index_out_of_range(self):
        with pytest.raises(QuantError):
            dequantize(tensor(QuantFormat.INT8, [1, 2]), 2)


class TestValidation:
    def test_ternary_invalid_code_names_index(self):
        with pytest.raises(QuantError, match="index 2"):
            tensor(QuantFormat.TERNARY, [0, 1, 0b10])

    @pytest.mark.parametrize("fmt, code", [(QuantFormat.INT8, 256), (QuantFormat.NF4, 16), (QuantFormat.TERNARY, 4)])
    def test_code_out_of_range(self, fmt, code):
        with pytest.raises(QuantError):
            tensor(fmt, [code])

    @pytest.mark.parametrize("scale", [0.0, -1.0, float("nan"), float("inf")])
    def test_bad_scale(self, scale):
        with pytest.raises(QuantError):
            tensor(QuantFormat.INT8, [1], scale)

    def test_shape_mismatch(self):
        with pytest.raises(QuantError):
            QuantizedTensor(QuantFormat.INT8, (2, 2), [1, 2, 3], 1.0)

    def test_codes_are_immutable(self):
        t = tensor(QuantFormat.INT8, [1, 2])
        with pytest.raises(ValueError):
            t.codes[0] = 5


class TestFlip:
    @pytest.mark.parametrize("fmt, expected", [(QuantFormat.INT8, 7), (QuantFormat.NF4, 3), (QuantFormat.TERNARY, 1)])
    def test_default_position_is_msb(self, fmt, expected):
        assert default_flip_position(fmt) == expected

    def test_int8_zero_msb(self):
        t = flip_bit(tensor(QuantFormat.INT8, [0x00], 0.5), 0, 7)
        assert int(t.codes[0]) == 0x80
        assert dequantize(t, 0) == -128 * 0.5

    def test_int8_max_msb(self):
        t = flip_bit(tensor(QuantFormat.INT8, [0x7F]), 0, 7)
        assert int(t.codes[0]) == 0xFF
        assert dequantize(t, 0) == -1.0

    def test_nf4_msb(self):
        t = flip_bit(tensor(QuantFormat.NF4, [0]), 0, 3)
        assert int(t.codes[0]) == 8
        assert dequantize(t, 0) == 0.0796

    def test_ternary_low_bit(self):
        t = flip_bit(tensor(QuantFormat.TERNARY, [0b01]), 0, 0)
        assert int(t.codes[0]) == 0b00

    def test_ternary_table_matches_clamp_rule(self):
        for code, pos in itertools.product([0b00, 0b01, 0b11], [0, 1]):
            got = int(flip_bit(tensor(QuantFormat.TERNARY, [code]), 0, pos).codes[0])
            assert got == oracles.flip("ternary", code, pos)
            assert got != 0b10

    def test_original_untouched(self):
        t = tensor(QuantFormat.INT8, [5, 6])
        flip_bit(t, 1, 7)
        assert t.codes.tolist() == [5, 6]

    @pytest.mark.parametrize("pos", [-1, 8])
    def test_bad_position(self, pos):
        with pytest.raises(QuantError):
            flip_bit(tensor(QuantFormat.INT8, [0]), 0, pos)

    def test_flip_codes_multiple(self):
        out = flip_codes(QuantFormat.INT8, np.array([0, 1, 2], dtype=np.uint8), [0, 2], 7)
        assert out.tolist() == [128, 1, 130]

    def test_flipped_dense_is_virtual(self):
        t = QuantizedTensor(QuantFormat.INT8, (2, 2), [1, 2, 3, 4], 1.0)
        dense = flipped_dense(t, [3], 7)
        assert dense.tolist() == [[1, 2], [3, 4 - 128]]
        assert t.dense().tolist() == [[1, 2], [3, 4]]

    @given(st.integers(0, 255), st.integers(0, 7))
    def test_int8_involution(self, code, pos):
        t = tensor(QuantFormat.INT8, [code])
        assert flip_bit(flip_bit(t, 0, pos), 0, pos) == t

    @given(st.integers(0, 15), st.integers(0, 3))
    def test_nf4_xor(self, code, pos):
        assert int(flip_bit(tensor(QuantFormat.NF4, [code]), 0, pos).codes[0]) == code ^ (1 << pos)


class TestQuantize:
    def test_int8_absmax_round_trip(self):
        w = np.array([[0.5, -1.0], [0.25, 0.0]])
        t = quantize(w, QuantFormat.INT8)
        assert t.scale == pytest.approx(1.0 / 127)
        assert np.max(np.abs(t.dense() - w)) <= t.scale / 2

    def test_nf4_nearest_level(self):
        w = np.array([[1.0, -1.0, 0.08, 0.0]])
        t = quantize(w, QuantFormat.NF4)
        assert t.codes.tolist() == [15, 0, 8, 7]

    def test_ternary_values(self):
        t = quantize(np.array([[2.0, -2.0, 0.01, 1.0]]), QuantFormat.TERNARY)
        assert set(np.unique(t.dense() / t.scale)) <= {-1.0, 0.0, 1.0}

    def test_all_zero_input(self):
        t = quantize(np.zeros((2, 2)), QuantFormat.INT8)
        assert np.all(t.dense() == 0.0)
