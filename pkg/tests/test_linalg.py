import numpy as np
import pytest

from cipherctl.modules.linalg import (
    Encoding,
    LEVEL_COST,
    EncVec,
    add_vec,
    columns_per_ciphertext,
    decrypt_vec,
    diagonals,
    encrypt_vec,
    eval_sum_batch,
    eval_sum_blocks,
    inner_vv,
    inner_vvr,
    make_encoding,
    mask,
    matvec_tall_diag,
    matvec_wide_diag,
    pack_columns,
    padded_rows,
    place,
    replicate_sum,
    rotate_sum,
    rotate_sum_indices,
    shift_left,
    unpack_columns,
    weigh,
)
from cipherctl.utils.errors import EncodingError, FootprintError

TOL = 1e-6


def _enc(he_pair, x, encoding=Encoding.V0, repeat=1) -> EncVec:
    ctx, keys, _, rng = he_pair
    return encrypt_vec(ctx, keys.pk, make_encoding(x, encoding, repeat, ctx.slots), rng)


def _slots(he_pair, vec_or_ct) -> np.ndarray:
    ctx, keys, _, _ = he_pair
    ct = vec_or_ct.ct if isinstance(vec_or_ct, EncVec) else vec_or_ct
    return ctx.decrypt_decode(keys.sk, ct)


class TestEncodings:
    def test_layouts(self):
        np.testing.assert_array_equal(make_encoding([1, 2, 3], Encoding.VV, n_slots=8).slots, [1, 2, 3, 1, 2, 3, 1, 2])
        vr = make_encoding([1, 2], Encoding.VR0, repeat=3, n_slots=8)
        np.testing.assert_array_equal(vr.slots, [1, 1, 1, 2, 2, 2, 0, 0])
        assert vr.footprint == 6
        v0 = make_encoding([4, 5], Encoding.V0, repeat=3, n_slots=4)
        np.testing.assert_array_equal(v0.slots, [4, 5, 0, 0])
        assert v0.repeat == 1

    def test_footprint_overflow(self):
        with pytest.raises(FootprintError):
            make_encoding(np.ones(600), Encoding.V0, n_slots=512)
        with pytest.raises(FootprintError):
            make_encoding(np.ones(200), Encoding.VR0, repeat=3, n_slots=512)

    def test_repeated_decryption(self, he_pair):
        ctx, keys, _, _ = he_pair
        vec = _enc(he_pair, [1.5, -2.0, 3.0], Encoding.VR0, repeat=4)
        np.testing.assert_allclose(decrypt_vec(ctx, keys.sk, vec), [1.5, -2.0, 3.0], atol=TOL)


class TestShifts:
    def test_shift_left_tracks_junk(self, he_pair):
        vec = _enc(he_pair, [1.0, 2.0, 3.0])
        shifted = shift_left(he_pair[2], vec, 2)
        assert shifted.junk_tail == 2
        slots = _slots(he_pair, shifted)
        np.testing.assert_allclose(slots[[0, -2, -1]], [3.0, 1.0, 2.0], atol=TOL)

    def test_place_moves_right(self, he_pair):
        placed = place(he_pair[2], _enc(he_pair, [1.0, 2.0, 3.0]), 5)
        assert (placed.footprint, placed.lead_zeros) == (8, 5)
        slots = _slots(he_pair, placed)
        np.testing.assert_allclose(slots[5:8], [1.0, 2.0, 3.0], atol=TOL)
        np.testing.assert_allclose(slots[:5], 0.0, atol=TOL)

    def test_leading_zeros_absorb_a_shift(self, he_pair):
        ev = he_pair[2]
        placed = place(ev, _enc(he_pair, [1.0, 2.0]), 4)
        back = shift_left(ev, placed, 3)
        assert back.junk_tail == 0 and back.lead_zeros == 1

    def test_junk_blocks_right_rotation(self, he_pair):
        ev = he_pair[2]
        shifted = shift_left(ev, _enc(he_pair, [1.0, 2.0]), 1)
        with pytest.raises(FootprintError):
            place(ev, shifted, 1)

    def test_budget(self, he_pair):
        ev = he_pair[2]
        vec = _enc(he_pair, [1.0, 2.0, 3.0])
        with pytest.raises(FootprintError):
            shift_left(ev, vec, 510)

    def test_add_vec_merges_metadata(self, he_pair):
        ev = he_pair[2]
        a = place(ev, _enc(he_pair, [1.0]), 2)
        b = _enc(he_pair, [5.0, 6.0])
        total = add_vec(ev, a, b)
        assert total.footprint == 3 and total.lead_zeros == 0
        np.testing.assert_allclose(_slots(he_pair, total)[:3], [5.0, 6.0, 1.0], atol=TOL)


class TestSums:
    def test_rotate_sum_indices(self):
        assert rotate_sum_indices(5, 1) == {1, 2}
        assert rotate_sum_indices(8, 3) == {3, 6, 12}
        assert rotate_sum_indices(1, 7) == set()

    def test_rotate_sum(self, he_pair):
        ctx, _, ev, rng = he_pair
        x = rng.normal(size=ctx.slots)
        out = _slots(he_pair, rotate_sum(ev, _enc(he_pair, x).ct, 5, 3))
        expected = sum(np.roll(x, -3 * d) for d in range(5))
        np.testing.assert_allclose(out, expected, atol=TOL)

    def test_eval_sum_batch(self, he_pair):
        x = np.arange(1.0, 13.0)
        ev = he_pair[2]
        out = _slots(he_pair, eval_sum_batch(ev, _enc(he_pair, x).ct, 3, footprint=12))
        np.testing.assert_allclose(out[[0, 3, 6, 9]], [6.0, 15.0, 24.0, 33.0], atol=TOL)
        with pytest.raises(FootprintError, match="larger"):
            eval_sum_batch(ev, _enc(he_pair, x).ct, 8, footprint=4)

    def test_eval_sum_batch_must_divide_the_footprint(self, he_pair):
        ev = he_pair[2]
        ct = _enc(he_pair, np.arange(1.0, 13.0)).ct
        with pytest.raises(FootprintError, match="does not divide"):
            eval_sum_batch(ev, ct, 5, footprint=12)
        with pytest.raises(FootprintError, match="does not divide"):
            eval_sum_batch(ev, ct, 3)

    def test_eval_sum_blocks(self, he_pair):
        x = np.arange(12.0)
        out = _slots(he_pair, eval_sum_blocks(he_pair[2], _enc(he_pair, x).ct, 4, 3))
        np.testing.assert_allclose(out[:4], x[:4] + x[4:8] + x[8:12], atol=TOL)

    def test_blocks_must_fit(self, he_pair):
        with pytest.raises(FootprintError):
            eval_sum_blocks(he_pair[2], _enc(he_pair, [1.0]).ct, 300, 2)

    def test_replicate_sum(self, he_pair):
        x = np.linspace(-1, 1, 17)
        out = _slots(he_pair, replicate_sum(he_pair[2], _enc(he_pair, x).ct))
        np.testing.assert_allclose(out, np.full(out.size, x.sum()), atol=1e-5)

    def test_mask(self, he_pair):
        vec = _enc(he_pair, [1.0, 2.0, 3.0, 4.0])
        masked = mask(he_pair[2], vec.ct, [1, 3], [10.0, -1.0])
        assert masked.level == vec.level + 1
        np.testing.assert_allclose(_slots(he_pair, masked)[:4], [0.0, 20.0, 0.0, -4.0], atol=TOL)


class TestMatrixVector:
    def test_diagonal_identity(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(5, 3))
        x = rng.normal(size=3)
        acc = sum(d * np.resize(np.roll(x, -i), 5) for i, d in enumerate(diagonals(A, "tall")))
        np.testing.assert_allclose(acc, A @ x)

    def test_extended_diagonals(self):
        rng = np.random.default_rng(1)
        A = rng.normal(size=(3, 8))
        x = rng.normal(size=8)
        diags = diagonals(A, "extended")
        assert len(diags) == padded_rows(3, 8) == 4
        z = sum(d * np.roll(x, -i) for i, d in enumerate(diags))
        folded = z[:4] + z[4:]
        np.testing.assert_allclose(folded[:3], A @ x)

    def test_wide_product(self, he_pair):
        ctx, keys, ev, rng = he_pair
        A = rng.normal(size=(2, 4))
        x = rng.normal(size=4)
        diag_cts = [_enc(he_pair, d).ct for d in diagonals(A, "extended")]
        out = matvec_wide_diag(ev, diag_cts, _enc(he_pair, x, Encoding.VV), A.shape)
        assert out.encoding is Encoding.VSTAR
        np.testing.assert_allclose(decrypt_vec(ctx, keys.sk, out), A @ x, atol=TOL)

    def test_tall_product(self, he_pair):
        ctx, keys, ev, rng = he_pair
        A = rng.normal(size=(4, 2))
        x = rng.normal(size=2)
        diag_cts = [_enc(he_pair, d).ct for d in diagonals(A, "tall")]
        out = matvec_tall_diag(ev, diag_cts, _enc(he_pair, x, Encoding.VV), rows=4)
        np.testing.assert_allclose(decrypt_vec(ctx, keys.sk, out), A @ x, atol=TOL)

    def test_products_take_tiled_operands(self, he_pair):
        ev = he_pair[2]
        A = np.ones((2, 4))
        diag_cts = [_enc(he_pair, d).ct for d in diagonals(A, "extended")]
        with pytest.raises(EncodingError):
            matvec_wide_diag(ev, diag_cts, _enc(he_pair, np.ones(4)), A.shape)


class TestInnerProducts:
    def test_inner_vv(self, he_pair):
        rng = he_pair[3]
        a, b = rng.normal(size=5), rng.normal(size=5)
        out = inner_vv(he_pair[2], _enc(he_pair, a), _enc(he_pair, b))
        assert _slots(he_pair, out)[0] == pytest.approx(a @ b, abs=TOL)

    def test_weighted_repeated_inner(self, he_pair):
        ctx, _, ev, rng = he_pair
        a, b, w = rng.normal(size=3), rng.normal(size=3), np.array([1.0, 0.5, 2.0])
        weights = make_encoding(w, Encoding.VR0, repeat=4, n_slots=ctx.slots)
        lhs, rhs = _enc(he_pair, a, Encoding.VR0, 4), _enc(he_pair, b, Encoding.VR0, 4)
        out = inner_vvr(ev, lhs, rhs, weights)
        assert out.level - lhs.level == LEVEL_COST["inner_vvr"] + LEVEL_COST["weigh"]
        assert inner_vvr(ev, lhs, rhs).level - lhs.level == LEVEL_COST["inner_vvr"]
        np.testing.assert_allclose(_slots(he_pair, out)[:4], np.full(4, a @ (w * b)), atol=TOL)

    def test_weigh(self, he_pair):
        ctx, _, ev, _ = he_pair
        vec = _enc(he_pair, [1.0, -2.0], Encoding.VR0, 3)
        out = weigh(ev, vec, make_encoding([3.0, 0.5], Encoding.VR0, repeat=3, n_slots=ctx.slots))
        assert out.level - vec.level == LEVEL_COST["weigh"]
        np.testing.assert_allclose(_slots(he_pair, out)[:6], [3.0, 3.0, 3.0, -1.0, -1.0, -1.0], atol=TOL)
        with pytest.raises(EncodingError, match="layout"):
            weigh(ev, vec, make_encoding([3.0, 0.5], Encoding.VR0, repeat=2, n_slots=ctx.slots))

    def test_repeat_mismatch(self, he_pair):
        with pytest.raises(EncodingError):
            inner_vvr(he_pair[2], _enc(he_pair, [1.0], Encoding.VR0, 2), _enc(he_pair, [1.0], Encoding.VR0, 4))


class TestPacking:
    def test_pack_unpack(self, he_pair):
        ctx, _, ev, rng = he_pair
        K = rng.normal(size=(3, 3))
        cols = [_enc(he_pair, K[:, j]) for j in range(3)]
        packed = pack_columns(ev, cols)
        assert len(packed) == 1
        np.testing.assert_allclose(_slots(he_pair, packed[0])[:9], K.T.ravel(), atol=TOL)
        unpacked = unpack_columns(ev, packed, 3)
        for j, col in enumerate(unpacked):
            assert col.level == 1
            slots = _slots(he_pair, col)
            np.testing.assert_allclose(slots[:3], K[:, j], atol=TOL)
            np.testing.assert_allclose(slots[3:], 0.0, atol=TOL)

    def test_capacity(self):
        assert columns_per_ciphertext(19, 512) == 26
        with pytest.raises(FootprintError):
            columns_per_ciphertext(600, 512)
