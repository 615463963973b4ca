from types import SimpleNamespace

import numpy as np
import pytest

from cipherctl.modules.controller import run_plain_loop
from cipherctl.modules.linalg import Encoding, encrypt_vec, make_encoding
from cipherctl.modules.protocol import (
    C2S,
    S2C,
    DepthLedger,
    SlotLayout,
    Transcript,
    TranscriptRecord,
    control_depth,
    footprint_rules,
    function_privacy_mask,
    inverse_depth,
    offline_required_moduli,
    online_rotation_indices,
    required_moduli,
    run_offline_protocol,
    run_online_protocol,
    schur_depth,
)
from cipherctl.utils.errors import BudgetExhaustedError, ConfigError, LedgerError, ProtocolError
from cipherctl.utils.settings import CtlConfig, HEConfig, Settings

DESK_RING = 1024
STEPS = 14


def _record(direction, kind, digests=(), levels=None, step=0):
    levels = tuple(levels) if levels is not None else tuple(0 for _ in digests)
    return TranscriptRecord(step, direction, kind, 100 * len(digests), max(levels, default=None), None, tuple(digests), levels)


class TestDepthBookkeeping:
    def test_depth_formulas(self):
        assert inverse_depth(1) == 6
        assert inverse_depth(6) == 8
        assert schur_depth(1) == 5
        assert schur_depth(6) == 8
        assert control_depth(2) == 5
        assert control_depth(6) == 7

    def test_required_moduli(self):
        assert required_moduli(CtlConfig()) == 16
        assert required_moduli(CtlConfig(), function_privacy=True) == 17
        assert required_moduli(CtlConfig(T_bar=0)) == 6
        assert required_moduli(CtlConfig(T_bar=2, refresh_period=5)) == 10
        assert offline_required_moduli() == 3
        assert offline_required_moduli(3) == 9

    def test_ledger(self):
        ledger = DepthLedger()
        ledger.declare("u", 5)
        assert ledger.check("u", SimpleNamespace(level=4), step=3) == 5
        with pytest.raises(LedgerError, match="step 4"):
            ledger.check("u", SimpleNamespace(level=5), step=4)
        assert ledger.series("u") == [(3, 5), (4, 6)]
        assert ledger.max_depth("u") == 6
        assert ledger.max_depth("s") == 0


class TestLayout:
    def test_desk_footprints(self, desk_cfg):
        rules = footprint_rules(2, 2, desk_cfg, DESK_RING // 2)
        assert rules["column building"] == (190, 512)
        assert rules["matrix packing"] == (361, 512)
        assert rules["window shifting"] == (190, 512)

    def test_no_packing_without_refresh(self):
        rules = footprint_rules(1, 1, CtlConfig(T_bar=3, refresh_period=5), 4096)
        assert rules["matrix packing"][0] == 0

    def test_rotation_indices_are_reduced(self, desk_cfg):
        lay = SlotLayout.of(2, 2, desk_cfg, 512)
        assert (lay.R, lay.L, lay.blocks) == (19, 4, 8)
        idx = online_rotation_indices(lay, desk_cfg.refresh_period)
        assert all(0 < k < 512 for k in idx)
        assert 2 * 19 in idx


class TestTranscriptAudit:
    def test_clean_transcript(self):
        t = Transcript()
        t.add(_record(C2S, "Setup", ["a", "b"]))
        t.add(_record(S2C, "SchurScalar", ["c"], levels=[5]))
        t.add(_record(C2S, "SchurInverse", ["d"]))
        t.add(_record(S2C, "WindowRequest"))
        report = t.audit()
        assert report["server_received"] == 3
        assert report["decrypted_kinds"] == ["SchurScalar"]
        assert t.total_bytes(C2S) == 300

    def test_stale_ciphertext(self):
        t = Transcript()
        t.add(_record(C2S, "FreshMeasurement", ["a"], levels=[2], step=6))
        with pytest.raises(ProtocolError, match="not a fresh encryption"):
            t.audit()

    def test_echo(self):
        t = Transcript()
        t.add(_record(S2C, "ControlPartial", ["x"], levels=[6]))
        t.add(_record(C2S, "FreshMeasurement", ["x"]))
        with pytest.raises(ProtocolError, match="echoes"):
            t.audit()

    def test_forbidden_decryption(self):
        t = Transcript()
        t.add(_record(S2C, "Setup", ["x"]))
        with pytest.raises(ProtocolError, match="for decryption"):
            t.audit()

    def test_csv(self, tmp_path):
        t = Transcript()
        t.add(_record(C2S, "Setup", ["a", "b"]))
        path = tmp_path / "transcript.csv"
        t.to_csv(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "step,direction,kind,bytes,level,moduli,ciphertexts,digest"
        assert lines[1].startswith("0,client->server,Setup,200,0,,2,")


class TestFunctionPrivacy:
    def test_mask_keeps_only_the_result_slots(self, he_pair):
        ctx, keys, ev, rng = he_pair
        vec = encrypt_vec(ctx, keys.pk, make_encoding(np.arange(1.0, 9.0), Encoding.V0, n_slots=ctx.slots), rng)
        masked = function_privacy_mask(ev, vec.ct, [0, 1, 2])
        slots = ctx.decrypt_decode(keys.sk, masked)
        np.testing.assert_allclose(slots[:3], [1.0, 2.0, 3.0], atol=1e-6)
        np.testing.assert_allclose(slots[3:], 0.0, atol=1e-6)


@pytest.fixture(scope="module")
def online_pair(quiet_plant, desk_cfg, desk_he, desk_offline):
    encrypted = run_online_protocol(quiet_plant, desk_cfg, desk_he, quiet_plant.setpoint, seed=7, steps=STEPS, offline=desk_offline)
    plain = run_plain_loop(quiet_plant, desk_cfg, quiet_plant.setpoint, seed=7, steps=STEPS, offline=desk_offline)
    return encrypted, plain


class TestOnlineProtocol:
    def test_inputs_match_the_plaintext_loop(self, online_pair):
        encrypted, plain = online_pair
        np.testing.assert_array_equal(encrypted.log.u[:2], plain.u[:2])
        assert np.abs(encrypted.log.u - plain.u).max() < 1e-3
        assert np.abs(encrypted.log.y - plain.y).max() < 1e-3

    def test_schur_complements_match(self, online_pair, desk_cfg):
        encrypted, plain = online_pair
        collect = slice(desk_cfg.L, desk_cfg.L + desk_cfg.T_bar)
        np.testing.assert_allclose(encrypted.log.s[collect], plain.s[collect], rtol=1e-4)

    def test_columns_grow_by_t_bar(self, online_pair, desk_cfg):
        encrypted, _ = online_pair
        assert encrypted.log.S[-1] == desk_cfg.S + desk_cfg.T_bar == 19

    def test_depth_ledger(self, online_pair):
        ledger = online_pair[0].ledger
        assert ledger.series("M_inv") == [(4, 6), (4, 2), (5, 6)]
        assert [d for _, d in ledger.series("s")] == [5, 5]
        depths = dict(ledger.series("u"))
        assert depths[2] == depths[3] == 5
        assert all(depths[t] == 7 for t in range(4, STEPS))

    def test_transcript_passes_the_audit(self, online_pair):
        encrypted = online_pair[0]
        report = encrypted.transcript.audit()
        assert "ControlPartial" in report["decrypted_kinds"]
        assert "RefreshRequest" in report["decrypted_kinds"]
        summary = encrypted.summary()
        assert summary["bytes_client_to_server"] > summary["bytes_server_to_client"] > 0

    def test_windows_are_pruned(self, online_pair):
        encrypted = online_pair[0]
        assert encrypted.prunes >= 1
        kinds = [r.kind for r in encrypted.transcript.records]
        assert kinds.count("FreshWindow") == encrypted.prunes

    def test_chain_too_short(self, quiet_plant, desk_cfg, desk_offline):
        with pytest.raises(ConfigError, match="moduli"):
            run_online_protocol(quiet_plant, desk_cfg, HEConfig(ring_dim=DESK_RING, moduli=6), quiet_plant.setpoint, 7, STEPS, desk_offline)

    def test_slots_too_few(self, quiet_plant, desk_cfg, desk_offline):
        with pytest.raises(ConfigError, match="footprint"):
            run_online_protocol(quiet_plant, desk_cfg, HEConfig(ring_dim=256, moduli=8), quiet_plant.setpoint, 7, STEPS, desk_offline)


class TestOfflineProtocol:
    @pytest.fixture(scope="class")
    def static_cfg(self, desk_cfg):
        return desk_cfg.model_copy(update={"T_bar": 0})

    def test_fresh_windows_match_offline_gains(self, quiet_plant, static_cfg, desk_offline):
        he = HEConfig(ring_dim=DESK_RING, moduli=3)
        encrypted = run_offline_protocol(quiet_plant, static_cfg, he, quiet_plant.setpoint, seed=7, steps=10, offline=desk_offline)
        plain = run_plain_loop(quiet_plant, static_cfg, quiet_plant.setpoint, seed=7, steps=10, offline=desk_offline, use_gains=True)
        assert np.abs(encrypted.log.u - plain.u).max() < 1e-4
        assert {d for _, d in encrypted.ledger.series("u")} == {2}
        encrypted.transcript.audit()

    def test_self_update_cycles_through_the_chain(self, quiet_plant, static_cfg, desk_offline):
        he = HEConfig(ring_dim=DESK_RING, moduli=9)
        encrypted = run_offline_protocol(quiet_plant, static_cfg, he, quiet_plant.setpoint, seed=7, steps=STEPS, self_update=True, offline=desk_offline)
        depths = [d for _, d in encrypted.ledger.series("u")]
        assert depths == [2, 4, 6, 8] * 3
        plain = run_plain_loop(quiet_plant, static_cfg, quiet_plant.setpoint, seed=7, steps=STEPS, offline=desk_offline, use_gains=True)
        assert np.abs(encrypted.log.u - plain.u).max() < 1e-3
        assert sum(r.kind == "OfflineMeasurement" for r in encrypted.transcript.records) == STEPS - static_cfg.M

    def test_chain_too_short(self, quiet_plant, static_cfg, desk_offline):
        with pytest.raises(BudgetExhaustedError):
            run_offline_protocol(quiet_plant, static_cfg, HEConfig(ring_dim=DESK_RING, moduli=4), quiet_plant.setpoint, 7, 5, True, desk_offline)


@pytest.mark.slow
def test_default_configuration_end_to_end(plant):
    settings = Settings()
    cfg = settings.get_ctl_config()
    he = settings.check_feasibility(plant.m, plant.p)
    steps = cfg.L + cfg.T_bar + 5
    encrypted = run_online_protocol(plant, cfg, he, plant.setpoint, seed=0, steps=steps)
    plain = run_plain_loop(plant, cfg, plant.setpoint, seed=0, steps=steps)
    assert np.abs(encrypted.log.u - plain.u).max() < 1e-3
    assert encrypted.log.S[-1] == cfg.S + cfg.T_bar
    assert encrypted.ledger.max_depth("u") <= he.moduli - 1
    encrypted.transcript.audit()
