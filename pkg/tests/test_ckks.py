import numpy as np
import pytest

from cipherctl.modules.ckks import CKKSContext, digest
from cipherctl.modules.ring import gen_params
from cipherctl.utils.errors import BudgetExhaustedError, EncodingError, KeyMissingError, ScaleError

TOL = 1e-6


def _encrypt(ctx, keys, rng, values, level=0):
    return ctx.encrypt(keys.pk, ctx.encode(values, level=level), rng)


class TestEncoding:
    def test_round_trip(self, he_pair):
        ctx, _, _, rng = he_pair
        values = rng.uniform(-100, 100, ctx.slots)
        np.testing.assert_allclose(ctx.decode(ctx.encode(values)), values, atol=TOL)

    def test_short_vectors_are_zero_padded(self, he_pair):
        ctx, _, _, _ = he_pair
        decoded = ctx.decode(ctx.encode([1.5, -2.5]))
        np.testing.assert_allclose(decoded[:2], [1.5, -2.5], atol=TOL)
        np.testing.assert_allclose(decoded[2:], 0.0, atol=TOL)

    def test_too_many_values(self, he_pair):
        ctx, _, _, _ = he_pair
        with pytest.raises(EncodingError):
            ctx.encode(np.zeros(ctx.slots + 1))

    def test_overflow_of_the_last_modulus(self, he_pair):
        ctx, _, _, _ = he_pair
        with pytest.raises(EncodingError):
            ctx.encode([1e9], level=ctx.max_level)


class TestArithmetic:
    def test_encrypt_decrypt(self, he_pair):
        ctx, keys, _, rng = he_pair
        values = rng.normal(size=ctx.slots) * 10
        np.testing.assert_allclose(ctx.decrypt_decode(keys.sk, _encrypt(ctx, keys, rng, values)), values, atol=TOL)

    def test_add_sub_neg(self, he_pair):
        ctx, keys, ev, rng = he_pair
        a, b = rng.normal(size=ctx.slots), rng.normal(size=ctx.slots)
        ca, cb = _encrypt(ctx, keys, rng, a), _encrypt(ctx, keys, rng, b)
        np.testing.assert_allclose(ctx.decrypt_decode(keys.sk, ev.add(ca, cb)), a + b, atol=TOL)
        np.testing.assert_allclose(ctx.decrypt_decode(keys.sk, ev.sub(ca, cb)), a - b, atol=TOL)
        np.testing.assert_allclose(ctx.decrypt_decode(keys.sk, ev.neg(ca)), -a, atol=TOL)
        np.testing.assert_allclose(ctx.decrypt_decode(keys.sk, ev.add_plain(ca, b)), a + b, atol=TOL)

    def test_products_consume_one_level(self, he_pair):
        ctx, keys, ev, rng = he_pair
        a, b = rng.normal(size=ctx.slots), rng.normal(size=ctx.slots)
        ca, cb = _encrypt(ctx, keys, rng, a), _encrypt(ctx, keys, rng, b)
        prod = ev.mul(ca, cb)
        assert (prod.level, prod.depth) == (1, 1)
        np.testing.assert_allclose(ctx.decrypt_decode(keys.sk, prod), a * b, atol=TOL)
        plain = ev.mul_plain(ca, b)
        assert plain.level == 1
        np.testing.assert_allclose(ctx.decrypt_decode(keys.sk, plain), a * b, atol=TOL)

    def test_rescale_divides_by_the_dropped_modulus(self, he_pair):
        ctx, keys, ev, rng = he_pair
        a, b = rng.normal(size=ctx.slots), rng.normal(size=ctx.slots)
        ca = _encrypt(ctx, keys, rng, a)
        prod = ev.mul_plain(ca, b)
        dropped = ca.moduli[-1]
        assert dropped != ctx.scale_base
        assert prod.scale == ctx.scale_base * ctx.scale_base / dropped
        again = ev.mul(prod, prod)
        assert again.scale == prod.scale * prod.scale / prod.moduli[-1]
        np.testing.assert_allclose(ctx.decrypt_decode(keys.sk, again), (a * b) ** 2, atol=1e-5)

    def test_plaintexts_follow_the_booked_scale(self, he_pair):
        ctx, keys, ev, rng = he_pair
        a, b = rng.normal(size=ctx.slots), rng.normal(size=ctx.slots)
        deep = ev.mul_plain(_encrypt(ctx, keys, rng, a), np.ones(ctx.slots))
        pt = ev.encode_at(b, deep)
        assert (pt.level, pt.scale) == (deep.level, deep.scale)
        np.testing.assert_allclose(ctx.decrypt_decode(keys.sk, ev.sub(deep, pt)), a - b, atol=TOL)

    def test_dot_relinearizes_once(self, he_pair):
        ctx, keys, ev, rng = he_pair
        xs = [rng.normal(size=ctx.slots) for _ in range(4)]
        cts = [_encrypt(ctx, keys, rng, x) for x in xs]
        out = ev.dot([(cts[0], cts[1]), (cts[2], cts[3])])
        np.testing.assert_allclose(ctx.decrypt_decode(keys.sk, out), xs[0] * xs[1] + xs[2] * xs[3], atol=TOL)

    def test_operands_at_different_levels_are_aligned(self, he_pair):
        ctx, keys, ev, rng = he_pair
        a, b = rng.normal(size=ctx.slots), rng.normal(size=ctx.slots)
        deep = ev.mul_plain(_encrypt(ctx, keys, rng, a), np.ones(ctx.slots))
        fresh = _encrypt(ctx, keys, rng, b)
        total = ev.add(fresh, deep)
        assert total.level == 1
        np.testing.assert_allclose(ctx.decrypt_decode(keys.sk, total), a + b, atol=TOL)

    def test_chain_runs_out(self, he_pair):
        ctx, keys, ev, rng = he_pair
        ct = _encrypt(ctx, keys, rng, np.full(ctx.slots, 0.5))
        for _ in range(ctx.max_level):
            ct = ev.mul(ct, ct)
        assert ct.active == 1
        np.testing.assert_allclose(ctx.decrypt_decode(keys.sk, ct), 0.5 ** (2**ctx.max_level), atol=1e-4)
        with pytest.raises(BudgetExhaustedError):
            ev.mul(ct, ct)

    def test_depth_two_operands_are_rejected(self, he_pair):
        ctx, keys, _, rng = he_pair
        ct = _encrypt(ctx, keys, rng, np.ones(4))
        raw = ctx.mult(ct, ct, keys.evk)
        with pytest.raises(ScaleError):
            ctx.mult(raw, ct, keys.evk)


class TestRotation:
    @pytest.mark.parametrize("k", [1, 5, -3, 16])
    def test_left_rotation(self, he_pair, k):
        ctx, keys, ev, rng = he_pair
        values = rng.normal(size=ctx.slots)
        rotated = ctx.decrypt_decode(keys.sk, ev.rot(_encrypt(ctx, keys, rng, values), k))
        np.testing.assert_allclose(rotated, np.roll(values, -k), atol=TOL)

    def test_hoisted_rotations_agree(self, he_pair):
        ctx, keys, ev, rng = he_pair
        values = rng.normal(size=ctx.slots)
        ct = _encrypt(ctx, keys, rng, values)
        hoisted = ctx.rotate_hoisted(ct, [0, 2, 7], keys.rot_keys)
        for k, out in hoisted.items():
            np.testing.assert_allclose(ctx.decrypt_decode(keys.sk, out), np.roll(values, -k), atol=TOL)

    def test_missing_key(self, he_pair):
        ctx, keys, ev, rng = he_pair
        with pytest.raises(KeyMissingError):
            ev.rot(_encrypt(ctx, keys, rng, np.ones(4)), 100)

    def test_server_keys_hold_no_secret(self, he_pair):
        _, keys, ev, _ = he_pair
        assert ev.keys.sk is None
        assert set(ev.keys.rot_keys) == set(keys.rot_keys)


class TestSerialization:
    def test_ciphertext_round_trip(self, he_pair):
        ctx, keys, ev, rng = he_pair
        values = rng.normal(size=ctx.slots)
        ct = ev.mul_plain(_encrypt(ctx, keys, rng, values), np.full(ctx.slots, 2.0))
        blob = ctx.serialize(ct)
        back = ctx.deserialize(blob)
        assert (back.level, back.depth, back.active) == (ct.level, ct.depth, ct.active)
        assert back.scale == ct.scale
        assert digest(ctx.serialize(back)) == digest(blob)
        np.testing.assert_allclose(ctx.decrypt_decode(keys.sk, back), 2 * values, atol=TOL)

    def test_deeper_ciphertexts_are_smaller(self, he_pair):
        ctx, keys, ev, rng = he_pair
        fresh = _encrypt(ctx, keys, rng, np.ones(4))
        deeper = ev.mul_plain(fresh, np.ones(4))
        assert len(ctx.serialize(deeper)) < len(ctx.serialize(fresh))

    def test_foreign_blob_rejected(self, he_pair):
        ctx, keys, _, rng = he_pair
        other = CKKSContext(gen_params(2048, 2))
        with pytest.raises(EncodingError):
            other.deserialize(ctx.serialize(_encrypt(ctx, keys, rng, np.ones(4))))

    def test_key_round_trip(self, he_pair):
        ctx, keys, _, _ = he_pair
        back = ctx.deserialize_key(ctx.serialize_key(keys.evk))
        np.testing.assert_array_equal(back.b, keys.evk.b)
        np.testing.assert_array_equal(back.a, keys.evk.a)
