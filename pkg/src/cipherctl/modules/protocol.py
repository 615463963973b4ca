"""
Client/server protocols for encrypted data-driven control.

The server holds the encrypted Hankel data, the scaled inverse alpha*M^-1 (one V0 ciphertext
per column) and the first rows of Uf. The client holds the secret key, measures the plant and
helps the server with the operations that have no cheap encrypted form: inverting the Schur
complement s and re-encrypting the inverse when the modulus chain runs low.

Slot layouts (R = S + T_bar, L = M + N):
  - Hankel columns, windows and samples are vr0: entry k of a vector occupies [kR, (k+1)R).
  - Columns of alpha*M^-1 and rows of Uf are v0 of length S_t.
  - The control partial packs the m vectors upsilon_i at offsets iR; the client sums slots
    [iR, iR + S_t) and divides by alpha.
"""

import csv
import hashlib
import logging
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from ..utils.errors import BudgetExhaustedError, ConfigError, DefinitenessError, LedgerError, ProtocolError
from ..utils.settings import CtlConfig, HEConfig
from . import ring
from .ckks import Ciphertext, CKKSContext, Evaluator, KeyMaterial, digest
from .controller import (
    Gains,
    OfflineData,
    Phase,
    RunLog,
    Streams,
    closed_loop,
    input_weights,
    make_streams,
    offline_gains,
    output_weights,
    prepare_offline,
)
from .linalg import (
    Encoding,
    EncVec,
    add_vec,
    diagonals,
    eval_sum_blocks,
    make_encoding,
    mask,
    matvec_indices,
    matvec_wide_diag,
    pack_columns,
    pack_indices,
    place,
    replicate_sum,
    rotate_sum,
    rotate_sum_indices,
    shift_left,
    unpack_columns,
)
from .plant import SystemModel

logger = logging.getLogger(__name__)

C2S = "client->server"
S2C = "server->client"

FRESH_DEPTH = 1
REFRESHED_DEPTH = 2


class MsgKind(str, Enum):
    SETUP = "Setup"
    FRESH_MEASUREMENT = "FreshMeasurement"
    SCHUR_SCALAR = "SchurScalar"
    SCHUR_INVERSE = "SchurInverse"
    CONTROL_PARTIAL = "ControlPartial"
    REFRESH_REQUEST = "RefreshRequest"
    REFRESH_REPLY = "RefreshReply"
    WINDOW_REQUEST = "WindowRequest"
    FRESH_WINDOW = "FreshWindow"
    OFFLINE_SETUP = "OfflineSetup"
    OFFLINE_MEASUREMENT = "OfflineMeasurement"
    OFFLINE_CONTROL = "OfflineControl"


# Server-produced kinds the client is allowed to decrypt.
ALLOWED_DECRYPT = frozenset({MsgKind.SCHUR_SCALAR, MsgKind.CONTROL_PARTIAL, MsgKind.REFRESH_REQUEST, MsgKind.OFFLINE_CONTROL})


@dataclass(frozen=True)
class ProtocolMsg:
    kind: MsgKind
    step: int
    cts: dict[str, list[Ciphertext]] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def one(self, name: str) -> Ciphertext:
        try:
            return self.cts[name][0]
        except (KeyError, IndexError) as exc:
            raise ProtocolError(f"{self.kind.value} message has no {name!r} ciphertext") from exc

    def all_cts(self) -> list[Ciphertext]:
        return [ct for group in self.cts.values() for ct in group]


# --- transcript and channel --------------------------------------------------------------


@dataclass(frozen=True)
class TranscriptRecord:
    step: int
    direction: str
    kind: str
    bytes: int
    level: int | None
    moduli: int | None
    digests: tuple[str, ...]
    ciphertext_levels: tuple[int, ...]


class Transcript:
    """Everything that crossed the channel, in order."""

    def __init__(self):
        self.records: list[TranscriptRecord] = []

    def add(self, record: TranscriptRecord):
        self.records.append(record)
        logger.debug("%s step=%d %s %d bytes level=%s", record.direction, record.step, record.kind, record.bytes, record.level)

    def total_bytes(self, direction: str | None = None) -> int:
        return sum(r.bytes for r in self.records if direction is None or r.direction == direction)

    def to_csv(self, path: Path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "direction", "kind", "bytes", "level", "moduli", "ciphertexts", "digest"])
            for r in self.records:
                combined = hashlib.sha256("".join(r.digests).encode("ascii")).hexdigest()[:16] if r.digests else ""
                writer.writerow([r.step, r.direction, r.kind, r.bytes, "" if r.level is None else r.level, "" if r.moduli is None else r.moduli, len(r.digests), combined])

    def audit(self) -> dict[str, Any]:
        """
        Structural privacy check.

        Every ciphertext the server receives is fresh (level 0) and never a copy of something
        the server sent; the client only decrypts server output of the allowed kinds.

        Raises:
            ProtocolError: on the first violation
        """
        sent_by_server: set[str] = set()
        received = 0
        decrypted_kinds: set[str] = set()
        for r in self.records:
            if r.direction == S2C:
                if r.digests:
                    if MsgKind(r.kind) not in ALLOWED_DECRYPT:
                        raise ProtocolError(f"step {r.step}: server sent ciphertexts of kind {r.kind} for decryption")
                    decrypted_kinds.add(r.kind)
                sent_by_server.update(r.digests)
                continue
            for dg, level in zip(r.digests, r.ciphertext_levels):
                if level != 0:
                    raise ProtocolError(f"step {r.step}: {r.kind} carries a ciphertext at level {level}, not a fresh encryption")
                if dg in sent_by_server:
                    raise ProtocolError(f"step {r.step}: {r.kind} echoes a server ciphertext")
                received += 1
        return {"client_fresh": True, "server_received": received, "decrypted_kinds": sorted(decrypted_kinds)}


class Channel:
    """In-process transport that serializes every ciphertext, so sizes are measured on the wire format."""

    def __init__(self, ctx: CKKSContext, transcript: Transcript | None = None):
        self.ctx = ctx
        self.transcript = transcript or Transcript()

    def send(self, msg: ProtocolMsg, direction: str) -> ProtocolMsg:
        delivered: dict[str, list[Ciphertext]] = {}
        size = 0
        digests: list[str] = []
        levels: list[int] = []
        for name, group in msg.cts.items():
            out = []
            for ct in group:
                blob = self.ctx.serialize(ct)
                size += len(blob)
                digests.append(digest(blob))
                levels.append(ct.level)
                out.append(self.ctx.deserialize(blob))
            delivered[name] = out
        cts = msg.all_cts()
        self.transcript.add(
            TranscriptRecord(
                step=msg.step,
                direction=direction,
                kind=msg.kind.value,
                bytes=size,
                level=max(levels) if levels else None,
                moduli=min(ct.active for ct in cts) if cts else None,
                digests=tuple(digests),
                ciphertext_levels=tuple(levels),
            )
        )
        return ProtocolMsg(msg.kind, msg.step, delivered, dict(msg.meta))


# --- depth bookkeeping -------------------------------------------------------------------------


def inverse_depth(previous: int) -> int:
    """Depth of alpha*M^-1 after one collection step."""
    return max(previous, 4) + 2


def schur_depth(inverse: int) -> int:
    return max(inverse, 3) + 2


def control_depth(inverse: int) -> int:
    return max(inverse, 4) + 1


def required_moduli(ctl: CtlConfig, function_privacy: bool = False) -> int:
    """
    Chain length of the online protocol: deepest ciphertext plus one, so that it is decrypted
    with two moduli.
    """
    collected = min(ctl.refresh_period, ctl.T_bar)
    deepest = 2 * collected + 5 + (1 if function_privacy else 0)
    return deepest + 1


def offline_required_moduli(self_update_steps: int = 0) -> int:
    return 2 * self_update_steps + 2 + 1


class DepthLedger:
    """Declared depths per quantity; every produced ciphertext is checked against them."""

    def __init__(self):
        self.declared: dict[str, int] = {}
        self.history: list[tuple[int, str, int]] = []

    def declare(self, name: str, depth: int):
        self.declared[name] = depth

    def check(self, name: str, ct: Ciphertext, step: int) -> int:
        actual = ct.level + 1
        expected = self.declared.get(name)
        self.history.append((step, name, actual))
        if expected is not None and actual != expected:
            raise LedgerError(f"step {step}: {name} at depth {actual}, declared {expected}")
        logger.debug("step %d: depth(%s) = %d", step, name, actual)
        return actual

    def max_depth(self, name: str) -> int:
        return max((d for _, n, d in self.history if n == name), default=0)

    def series(self, name: str) -> list[tuple[int, int]]:
        return [(s, d) for s, n, d in self.history if n == name]


# --- layout and feasibility ------------------------------------------------------------------------


@dataclass(frozen=True)
class SlotLayout:
    m: int
    p: int
    M: int
    N: int
    S: int
    T_bar: int
    slots: int

    @property
    def L(self) -> int:
        return self.M + self.N

    @property
    def R(self) -> int:
        """Repeat factor of vr0 encodings: room for every column collected online."""
        return self.S + self.T_bar

    @property
    def blocks(self) -> int:
        return max(self.m, self.p) * self.L

    @classmethod
    def of(cls, m: int, p: int, ctl: CtlConfig, slots: int) -> "SlotLayout":
        return cls(m, p, ctl.M, ctl.N, ctl.S, ctl.T_bar, slots)


def footprint_rules(m: int, p: int, ctl: CtlConfig, slots: int) -> dict[str, tuple[int, int]]:
    """
    Slot usage against capacity for the three layout constraints.

    column building: the current-column windows absorb one block of junk per push beyond L.
    matrix packing: a refresh packs alpha*M^-1 into one ciphertext.
    window shifting: past window plus reference with one free block before a prune.
    """
    lay = SlotLayout.of(m, p, ctl, slots)
    b = max(m, p)
    column = b * lay.R * (lay.L + ctl.T_bar - 1) if ctl.T_bar else 0
    packing = lay.R * lay.R if ctl.T_bar > ctl.refresh_period else 0
    window = b * lay.L * lay.R + b * lay.R
    return {"column building": (column, slots), "matrix packing": (packing, slots), "window shifting": (window, slots)}


def online_rotation_indices(lay: SlotLayout, refresh_period: int) -> set[int]:
    R, m, p, M, L = lay.R, lay.m, lay.p, lay.M, lay.L
    idx = {m * R, p * R, -m * (L - 1) * R, -p * (L - 1) * R, -m * (M - 1) * R, -p * (M - 1) * R, -p * M * R}
    idx |= rotate_sum_indices(lay.blocks, R)
    idx |= rotate_sum_indices(lay.slots, 1)
    for c in range(lay.S, lay.S + lay.T_bar):
        idx |= {(m * M + i) * R - c for i in range(m)}
    idx |= {-i * R for i in range(1, m)}
    for k in range(refresh_period, lay.T_bar, refresh_period):
        width = lay.S + k
        idx |= pack_indices(width, lay.slots, width)
    return {k % lay.slots for k in idx} - {0}


def offline_rotation_indices(m: int, p: int, M: int, N: int, slots: int, self_update: bool) -> set[int]:
    idx = matvec_indices((m, p * N), "extended") | matvec_indices((m, p * M), "extended") | matvec_indices((m, m * M), "extended")
    if self_update:
        idx |= {m, -m * (M - 1)} | rotate_sum_indices(slots // (m * M), -m * M)
    return {k % slots for k in idx} - {0}


def make_context(he: HEConfig) -> CKKSContext:
    params = ring.gen_params(he.ring_dim, he.moduli, he.first_mod_bits, he.scale_bits)
    return CKKSContext(params)


class PartyClock:
    """Wall time per (party, phase)."""

    def __init__(self):
        self.totals: dict[tuple[str, str], float] = defaultdict(float)
        self.steps: dict[str, int] = defaultdict(int)

    @contextmanager
    def measure(self, party: str, phase: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.totals[(party, phase)] += time.perf_counter() - start

    def per_step(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = defaultdict(dict)
        for (party, phase), total in self.totals.items():
            out[phase][party] = total / max(1, self.steps[phase])
        return dict(out)


# --- online protocol: server ---------------------------------------------------------------------


def push_sample(ev: Evaluator, window: EncVec | None, sample: EncVec, capacity: int) -> EncVec:
    """Drop the oldest block of a window and append sample as its newest block."""
    placed = place(ev, sample, (capacity - 1) * sample.footprint)
    placed = replace(placed, logical_len=capacity * sample.logical_len)
    if window is None:
        return placed
    return add_vec(ev, shift_left(ev, window, sample.footprint), placed)


def function_privacy_mask(ev: Evaluator, ct: Ciphertext, keep) -> Ciphertext:
    """Zero every slot outside keep; one level."""
    return mask(ev, ct, keep)


class OnlineServer:
    """Server side of the online-feedback protocol."""

    def __init__(self, ev: Evaluator, layout: SlotLayout, cfg: CtlConfig, ledger: DepthLedger | None = None, function_privacy: bool = False):
        self.ev = ev
        self.lay = layout
        self.cfg = cfg
        self.ledger = ledger or DepthLedger()
        self.function_privacy = function_privacy
        R = layout.R
        wy = output_weights(cfg, layout.p)
        wu = input_weights(cfg, layout.m)
        self._wy = np.repeat(wy, R)
        self._wu = np.repeat(wu, R)
        self._wu_past = np.repeat(np.concatenate([wu[: layout.m * cfg.M], np.zeros(layout.m * cfg.N)]), R)
        self.hu: list[EncVec] = []
        self.hy: list[EncVec] = []
        self.K: list[EncVec] = []
        self.rows: list[EncVec] = []
        self.u_win: EncVec | None = None
        self.y_win: EncVec | None = None
        self.hu_cur: EncVec | None = None
        self.hy_cur: EncVec | None = None
        self.r_vec: EncVec | None = None
        self.collected = 0
        self.since_refresh = 0
        self.d_inverse = FRESH_DEPTH
        self.prunes = 0
        self._pending: dict[str, Any] | None = None

    @property
    def columns(self) -> int:
        return len(self.K)

    def _vr0(self, ct: Ciphertext, length: int) -> EncVec:
        R = self.lay.R
        return EncVec(ct, Encoding.VR0, length, self.ev.slots, repeat=R, footprint=length * R)

    def _v0(self, ct: Ciphertext, length: int) -> EncVec:
        return EncVec(ct, Encoding.V0, length, self.ev.slots, footprint=length)

    def setup(self, msg: ProtocolMsg):
        if msg.kind is not MsgKind.SETUP:
            raise ProtocolError(f"expected Setup, got {msg.kind.value}")
        lay = self.lay
        self.hu = [self._vr0(ct, lay.m * lay.L) for ct in msg.cts["hu"]]
        self.hy = [self._vr0(ct, lay.p * lay.L) for ct in msg.cts["hy"]]
        self.K = [self._v0(ct, lay.S) for ct in msg.cts["k"]]
        self.rows = [self._v0(ct, lay.S) for ct in msg.cts["rows"]]
        if not len(self.hu) == len(self.hy) == len(self.K) == lay.S or len(self.rows) != lay.m:
            raise ProtocolError("setup message does not match the slot layout")
        logger.info("server holds %d offline columns (%d slots per ciphertext)", lay.S, self.ev.slots)

    # -- sample intake --

    @property
    def collecting(self) -> bool:
        return self.collected < self.lay.T_bar

    def needs_prune(self) -> bool:
        """True when the next push would let window junk reach the product footprint."""
        lay = self.lay
        for win, b in ((self.u_win, lay.m), (self.y_win, lay.p)):
            if win is not None and b * lay.L * lay.R + win.junk_tail + b * lay.R > self.ev.slots:
                return True
        return False

    def window_request(self, step: int) -> ProtocolMsg:
        self.prunes += 1
        logger.info("step %d: asking the client for fresh windows (prune %d)", step, self.prunes)
        return ProtocolMsg(MsgKind.WINDOW_REQUEST, step)

    def replace_windows(self, msg: ProtocolMsg):
        if msg.kind is not MsgKind.FRESH_WINDOW:
            raise ProtocolError(f"expected FreshWindow, got {msg.kind.value}")
        self.u_win = self._vr0(msg.one("u_bar"), self.lay.m * self.lay.M)
        self.y_win = self._vr0(msg.one("y_bar"), self.lay.p * self.lay.M)

    def receive_measurement(self, msg: ProtocolMsg):
        if msg.kind is not MsgKind.FRESH_MEASUREMENT:
            raise ProtocolError(f"expected FreshMeasurement, got {msg.kind.value}")
        lay = self.lay
        u = self._vr0(msg.one("u"), lay.m)
        y = self._vr0(msg.one("y"), lay.p)
        if self.collecting:
            self.hu_cur = push_sample(self.ev, self.hu_cur, u, lay.L)
            self.hy_cur = push_sample(self.ev, self.hy_cur, y, lay.L)
        else:
            self.hu_cur = self.hy_cur = None
        self.u_win = push_sample(self.ev, self.u_win, u, lay.M)
        self.y_win = push_sample(self.ev, self.y_win, y, lay.M)
        if "r" in msg.cts:
            self.r_vec = self._vr0(msg.one("r"), lay.p * lay.N)

    # -- collection --

    def collect(self, step: int) -> ProtocolMsg:
        """
        Border M with the current column and send the Schur complement alpha*s.

        Also appends the column to the Hankel data and the new entries to the Uf rows; the
        inverse is completed by finish() once 1/s arrives.
        """
        if self._pending is not None:
            raise ProtocolError("previous collection step is still waiting for 1/s")
        if not self.collecting or self.hu_cur is None:
            raise ProtocolError(f"step {step}: no collection in progress")
        ev, lay, cfg = self.ev, self.lay, self.cfg
        R, B, alpha = lay.R, lay.blocks, cfg.alpha
        h_u, h_y = self.hu_cur, self.hy_cur
        width = self.columns

        qu = ev.mul_plain(h_u.ct, self._wu)
        qy = ev.mul_plain(h_y.ct, self._wy)
        qu_a = ev.mul_plain(h_u.ct, alpha * self._wu)
        qy_a = ev.mul_plain(h_y.ct, alpha * self._wy)
        mu = eval_sum_blocks(ev, ev.dot([(qy_a, h_y.ct), (qu_a, h_u.ct)]), R, B)
        mu = ev.add_plain(mu, np.full(ev.slots, alpha * cfg.lambda_g))
        m_parts = [eval_sum_blocks(ev, ev.dot([(qy, self.hy[j].ct), (qu, self.hu[j].ct)]), R, B) for j in range(width)]
        v = ev.dot([(self.K[j].ct, m_parts[j]) for j in range(width)])
        unit = np.zeros(ev.slots)
        picked = []
        for j in range(width):
            unit[:] = 0.0
            unit[j] = 1.0
            picked.append(ev.mul_plain(m_parts[j], unit))
        mm = picked[0]
        for ct in picked[1:]:
            mm = ev.add(mm, ct)
        s = ev.sub(mu, replicate_sum(ev, ev.mul(mm, v)))

        self.ledger.declare("s", schur_depth(self.d_inverse))
        self.ledger.check("s", s, step)
        if self.function_privacy:
            s = function_privacy_mask(ev, s, [0])
            self.ledger.declare("s_masked", schur_depth(self.d_inverse) + 1)
            self.ledger.check("s_masked", s, step)

        for i, row in enumerate(self.rows):
            src = (lay.m * lay.M + i) * R
            entry = ev.rot(mask(ev, h_u.ct, [src]), src - width)
            self.rows[i] = add_vec(ev, row, self._v0(entry, width + 1))
        self._pending = {"m": m_parts, "v": v, "width": width}
        self.hu.append(h_u)
        self.hy.append(h_y)
        return ProtocolMsg(MsgKind.SCHUR_SCALAR, step, {"s": [s]}, {"columns": width})

    def finish(self, msg: ProtocolMsg):
        """Complete alpha*M^-1 for the bordered matrix from the client's fresh 1/s."""
        if msg.kind is not MsgKind.SCHUR_INVERSE:
            raise ProtocolError(f"expected SchurInverse, got {msg.kind.value}")
        if self._pending is None:
            raise ProtocolError("no collection step is waiting for 1/s")
        ev, alpha = self.ev, self.cfg.alpha
        inv = msg.one("inv")
        m_parts, v, width = self._pending["m"], self._pending["v"], self._pending["width"]
        step = msg.step

        unit = np.zeros(ev.slots)
        scaled_inv = []
        for j in range(width):
            unit[:] = 0.0
            unit[j] = 1.0 / alpha
            scaled_inv.append(ev.mul_plain(inv, unit))
        x = ev.dot([(m_parts[j], scaled_inv[j]) for j in range(width)])
        e_last = np.zeros(ev.slots)
        e_last[width] = alpha
        v_border = ev.sub(v, ev.encode_at(e_last, v))
        new_cols = []
        for k in self.K:
            rep = replicate_sum(ev, ev.mul(k.ct, x))
            new_cols.append(ev.add(k.ct, ev.mul(rep, v_border)))
        last = ev.mul(ev.neg(v_border), inv)
        level = max(ct.level for ct in new_cols)
        new_cols = [ev.drop_to(ct, level) for ct in new_cols] + [ev.drop_to(last, level)]
        self.K = [self._v0(ct, width + 1) for ct in new_cols]
        self.d_inverse = inverse_depth(self.d_inverse)
        self.ledger.declare("M_inv", self.d_inverse)
        self.ledger.check("M_inv", self.K[0].ct, step)
        self.collected += 1
        self.since_refresh += 1
        self._pending = None
        logger.debug("step %d: inverse bordered to %d columns", step, width + 1)

    # -- control --

    def control(self, step: int) -> ProtocolMsg:
        """Packed partial products of the first inputs, upsilon_i at offsets iR."""
        if self._pending is not None:
            raise ProtocolError("control requested while 1/s is outstanding")
        if self.u_win is None or self.r_vec is None:
            raise ProtocolError(f"step {step}: no window or reference received yet")
        ev, lay = self.ev, self.lay
        R, B = lay.R, lay.blocks
        width = self.columns
        yr = add_vec(ev, self.y_win, place(ev, self.r_vec, lay.p * lay.M * R))
        yq = ev.mul_plain(yr.ct, self._wy)
        uq = ev.mul_plain(self.u_win.ct, self._wu_past)
        z = [eval_sum_blocks(ev, ev.dot([(self.hy[j].ct, yq), (self.hu[j].ct, uq)]), R, B) for j in range(width)]
        packed = None
        for i, row in enumerate(self.rows):
            upsilon = ev.dot([(self.K[j].ct, ev.mul(row.ct, z[j])) for j in range(width)])
            term = place(ev, self._v0(upsilon, width), i * R)
            packed = term if packed is None else add_vec(ev, packed, term)
        ct = packed.ct
        self.ledger.declare("u", control_depth(self.d_inverse))
        self.ledger.check("u", ct, step)
        if self.function_privacy:
            keep = np.concatenate([np.arange(i * R, i * R + width) for i in range(lay.m)])
            ct = function_privacy_mask(ev, ct, keep)
            self.ledger.declare("u_masked", control_depth(self.d_inverse) + 1)
            self.ledger.check("u_masked", ct, step)
        return ProtocolMsg(MsgKind.CONTROL_PARTIAL, step, {"upsilon": [ct]}, {"columns": width, "repeat": R})

    # -- refresh --

    def refresh_due(self) -> bool:
        return self.collecting and self.since_refresh > 0 and self.since_refresh % self.cfg.refresh_period == 0

    def refresh_request(self, step: int) -> ProtocolMsg:
        packed = pack_columns(self.ev, self.K)
        logger.info("step %d: refreshing alpha*M^-1 (%d columns in %d ciphertexts)", step, self.columns, len(packed))
        return ProtocolMsg(MsgKind.REFRESH_REQUEST, step, {"packed": packed}, {"width": self.columns})

    def refresh_apply(self, msg: ProtocolMsg):
        if msg.kind is not MsgKind.REFRESH_REPLY:
            raise ProtocolError(f"expected RefreshReply, got {msg.kind.value}")
        self.K = unpack_columns(self.ev, msg.cts["packed"], self.columns)
        self.d_inverse = REFRESHED_DEPTH
        self.since_refresh = 0
        self.ledger.declare("M_inv", REFRESHED_DEPTH)
        self.ledger.check("M_inv", self.K[0].ct, msg.step)


def static_phase_step(server: OnlineServer, step: int) -> ProtocolMsg:
    """Control against the frozen inverse and Hankel columns."""
    if server.collecting:
        raise ProtocolError(f"step {step}: collection is not finished")
    return server.control(step)


# --- online protocol: client ----------------------------------------------------------------------


class OnlineClient:
    """Key holder: measures, inverts s, decodes the control partials and re-encrypts on request."""

    def __init__(self, ctx: CKKSContext, keys: KeyMaterial, layout: SlotLayout, cfg: CtlConfig, rng: np.random.Generator):
        self.ctx = ctx
        self.keys = keys
        self.lay = layout
        self.cfg = cfg
        self.rng = rng
        self.last_s = float("nan")
        self.encryptions = 0
        self.decryptions = 0

    def _encrypt(self, slots: np.ndarray) -> Ciphertext:
        self.encryptions += 1
        return self.ctx.encrypt(self.keys.pk, self.ctx.encode(slots), self.rng)

    def _decrypt(self, ct: Ciphertext) -> np.ndarray:
        self.decryptions += 1
        return self.ctx.decrypt_decode(self.keys.sk, ct)

    def _repeated(self, x) -> Ciphertext:
        return self._encrypt(make_encoding(x, Encoding.VR0, self.lay.R, self.ctx.slots).slots)

    def setup(self, offline: OfflineData) -> ProtocolMsg:
        """Encrypt the offline Hankel columns, alpha*M^-1 and the first rows of Uf."""
        hset = offline.hset
        if hset.S != self.lay.S:
            raise ProtocolError(f"offline data has {hset.S} columns, layout expects {self.lay.S}")
        slots = self.ctx.slots
        K = self.cfg.alpha * offline.M_inv
        cts = {
            "hu": [self._repeated(hset.HU[:, j]) for j in range(hset.S)],
            "hy": [self._repeated(hset.HY[:, j]) for j in range(hset.S)],
            "k": [self._encrypt(make_encoding(K[:, j], Encoding.V0, n_slots=slots).slots) for j in range(hset.S)],
            "rows": [self._encrypt(make_encoding(hset.Uf[i], Encoding.V0, n_slots=slots).slots) for i in range(hset.m)],
        }
        return ProtocolMsg(MsgKind.SETUP, 0, cts)

    def measurement(self, step: int, u, y, r=None) -> ProtocolMsg:
        cts = {"u": [self._repeated(u)], "y": [self._repeated(y)]}
        if r is not None:
            cts["r"] = [self._repeated(r)]
        return ProtocolMsg(MsgKind.FRESH_MEASUREMENT, step, cts)

    def fresh_windows(self, step: int, u_hist: np.ndarray, y_hist: np.ndarray) -> ProtocolMsg:
        """Windows of the M samples before step."""
        M = self.lay.M
        return ProtocolMsg(
            MsgKind.FRESH_WINDOW,
            step,
            {"u_bar": [self._repeated(u_hist[step - M : step].ravel())], "y_bar": [self._repeated(y_hist[step - M : step].ravel())]},
        )

    def invert(self, msg: ProtocolMsg) -> ProtocolMsg:
        if msg.kind is not MsgKind.SCHUR_SCALAR:
            raise ProtocolError(f"expected SchurScalar, got {msg.kind.value}")
        s = float(self._decrypt(msg.one("s"))[0]) / self.cfg.alpha
        if not s > 0:
            raise DefinitenessError(s, msg.step)
        self.last_s = s
        return ProtocolMsg(MsgKind.SCHUR_INVERSE, msg.step, {"inv": [self._encrypt(np.full(self.ctx.slots, 1.0 / s))]})

    def control(self, msg: ProtocolMsg) -> np.ndarray:
        if msg.kind is not MsgKind.CONTROL_PARTIAL:
            raise ProtocolError(f"expected ControlPartial, got {msg.kind.value}")
        slots = self._decrypt(msg.one("upsilon"))
        width, R = msg.meta["columns"], msg.meta["repeat"]
        return np.array([slots[i * R : i * R + width].sum() for i in range(self.lay.m)]) / self.cfg.alpha

    def refresh(self, msg: ProtocolMsg) -> ProtocolMsg:
        if msg.kind is not MsgKind.REFRESH_REQUEST:
            raise ProtocolError(f"expected RefreshRequest, got {msg.kind.value}")
        fresh = [self._encrypt(self._decrypt(ct)) for ct in msg.cts["packed"]]
        return ProtocolMsg(MsgKind.REFRESH_REPLY, msg.step, {"packed": fresh}, dict(msg.meta))


# --- closed-loop drivers ----------------------------------------------------------------------------


@dataclass
class Session:
    ctx: CKKSContext
    client_keys: KeyMaterial
    ev: Evaluator
    rotation_keys: int


def open_session(he: HEConfig, indices: set[int], rng: np.random.Generator) -> Session:
    ctx = make_context(he)
    keys = ctx.keygen(rng, sorted(indices))
    ev = Evaluator(ctx, keys.public(), hoisted=he.hoisted_rotations)
    logger.info("HE session: N=%d, %d moduli (%d bits), %d rotation keys", he.ring_dim, he.moduli, ctx.params.total_bits, len(keys.rot_keys))
    return Session(ctx, keys, ev, len(keys.rot_keys))


class EncryptedController:
    """Policy that computes each input through the online protocol."""

    def __init__(self, client: OnlineClient, server: OnlineServer, channel: Channel, clock: PartyClock | None = None):
        self.client = client
        self.server = server
        self.channel = channel
        self.clock = clock or PartyClock()
        self._sent = 0

    @property
    def columns(self) -> int:
        return self.server.columns

    @property
    def last_s(self) -> float:
        return self.client.last_s

    def _send_samples(self, t: int, phase: str, u_hist: np.ndarray, y_hist: np.ndarray, r: np.ndarray):
        for j in range(self._sent, t):
            if self.server.needs_prune():
                self.channel.send(self.server.window_request(j), S2C)
                with self.clock.measure("client", phase):
                    msg = self.client.fresh_windows(j, u_hist, y_hist)
                self.server.replace_windows(self.channel.send(msg, C2S))
            with self.clock.measure("client", phase):
                msg = self.client.measurement(j, u_hist[j], y_hist[j], r if j == t - 1 else None)
            with self.clock.measure("server", phase):
                self.server.receive_measurement(self.channel.send(msg, C2S))
        self._sent = t

    def control(self, t: int, phase: Phase, u_hist: np.ndarray, y_hist: np.ndarray, r: np.ndarray) -> np.ndarray:
        name = phase.value
        self.clock.steps[name] += 1
        self._send_samples(t, name, u_hist, y_hist, r)
        if phase is Phase.COLLECT:
            with self.clock.measure("server", name):
                scalar = self.channel.send(self.server.collect(t), S2C)
            with self.clock.measure("client", name):
                inverse = self.channel.send(self.client.invert(scalar), C2S)
            with self.clock.measure("server", name):
                self.server.finish(inverse)
        with self.clock.measure("server", name):
            partial = self.server.control(t) if phase is not Phase.STATIC else static_phase_step(self.server, t)
            partial = self.channel.send(partial, S2C)
        with self.clock.measure("client", name):
            u = self.client.control(partial)
        if self.server.refresh_due():
            with self.clock.measure("server", name):
                request = self.channel.send(self.server.refresh_request(t), S2C)
            with self.clock.measure("client", name):
                reply = self.channel.send(self.client.refresh(request), C2S)
            with self.clock.measure("server", name):
                self.server.refresh_apply(reply)
        return u


@dataclass
class EncryptedRun:
    log: RunLog
    transcript: Transcript
    ledger: DepthLedger
    clock: PartyClock
    session: Session
    layout: SlotLayout | None = None
    prunes: int = 0

    def summary(self) -> dict[str, Any]:
        out = self.log.summary()
        out.update(
            {
                "rotation_keys": self.session.rotation_keys,
                "bytes_client_to_server": self.transcript.total_bytes(C2S),
                "bytes_server_to_client": self.transcript.total_bytes(S2C),
                "window_prunes": self.prunes,
                "per_step_seconds": self.clock.per_step(),
            }
        )
        return out


def run_online_protocol(
    model: SystemModel,
    cfg: CtlConfig,
    he: HEConfig,
    reference,
    seed: int,
    steps: int,
    offline: OfflineData | None = None,
) -> EncryptedRun:
    """Closed loop with the online-feedback protocol; same seeds give the plaintext run's noise."""
    streams = make_streams(seed)
    offline = offline or prepare_offline(model, cfg, streams.offline)
    for rule, (used, available) in footprint_rules(model.m, model.p, cfg, he.slots).items():
        if used > available:
            raise ConfigError(f"{rule} footprint {used} exceeds {available} slots")
    needed = required_moduli(cfg, he.function_privacy)
    if he.moduli < needed:
        raise ConfigError(f"moduli: {he.moduli} moduli cannot host the online circuit (need {needed})")
    layout = SlotLayout.of(model.m, model.p, cfg, he.slots)
    session = open_session(he, online_rotation_indices(layout, cfg.refresh_period), streams.keys)
    channel = Channel(session.ctx)
    ledger = DepthLedger()
    client = OnlineClient(session.ctx, session.client_keys, layout, cfg, streams.client)
    server = OnlineServer(session.ev, layout, cfg, ledger, he.function_privacy)
    server.setup(channel.send(client.setup(offline), C2S))
    policy = EncryptedController(client, server, channel)
    log = closed_loop(model, cfg, reference, streams, steps, policy)
    logger.info("encrypted run finished: %s", log.summary())
    return EncryptedRun(log, channel.transcript, ledger, policy.clock, session, layout, server.prunes)


# --- offline-feedback protocol ------------------------------------------------------------------------


def _gain_diagonals(gains: Gains) -> dict[str, list[np.ndarray]]:
    return {name: diagonals(getattr(gains, name), "extended") for name in ("A_r", "A_y", "A_u")}


class OfflineServer:
    """
    Server of the offline-feedback protocol: u_t = A_r r + A_y y_bar + A_u u_bar on encrypted gains.

    In self-update mode the server advances E(u_bar) itself from its own u_t and asks for a
    fresh window once the chain cannot host another step.
    """

    def __init__(self, ev: Evaluator, m: int, p: int, M: int, N: int, self_update: bool = False, ledger: DepthLedger | None = None):
        self.ev = ev
        self.m, self.p, self.M, self.N = m, p, M, N
        self.self_update = self_update
        self.ledger = ledger or DepthLedger()
        self.diags: dict[str, list[Ciphertext]] = {}
        self.u_bar: EncVec | None = None
        self.steps_since_fresh = 0
        self.refreshes = 0

    def setup(self, msg: ProtocolMsg):
        if msg.kind is not MsgKind.OFFLINE_SETUP:
            raise ProtocolError(f"expected OfflineSetup, got {msg.kind.value}")
        self.diags = {name: list(msg.cts[name]) for name in ("A_r", "A_y", "A_u")}

    def _vv(self, ct: Ciphertext, length: int) -> EncVec:
        return EncVec(ct, Encoding.VV, length, self.ev.slots, footprint=self.ev.slots)

    def step(self, msg: ProtocolMsg) -> ProtocolMsg:
        if msg.kind is not MsgKind.OFFLINE_MEASUREMENT:
            raise ProtocolError(f"expected OfflineMeasurement, got {msg.kind.value}")
        ev, m, p, M, N = self.ev, self.m, self.p, self.M, self.N
        if "u_bar" in msg.cts:
            self.u_bar = self._vv(msg.one("u_bar"), m * M)
            self.steps_since_fresh = 0
        elif not self.self_update or self.u_bar is None:
            raise ProtocolError(f"step {msg.step}: no input window available")
        r = self._vv(msg.one("r"), p * N)
        y_bar = self._vv(msg.one("y_bar"), p * M)
        terms = [
            matvec_wide_diag(ev, self.diags["A_r"], r, (m, p * N)),
            matvec_wide_diag(ev, self.diags["A_y"], y_bar, (m, p * M)),
            matvec_wide_diag(ev, self.diags["A_u"], self.u_bar, (m, m * M)),
        ]
        u = terms[0].ct
        for term in terms[1:]:
            u = ev.add(u, term.ct)
        self.ledger.declare("u", 2 * self.steps_since_fresh + 2)
        depth = self.ledger.check("u", u, msg.step)
        meta: dict[str, Any] = {"refresh": False}
        if self.self_update:
            if depth + 2 > len(ev.ctx.chain) - 1:
                meta["refresh"] = True
                self.refreshes += 1
                self.u_bar = None
                logger.info("step %d: input window out of levels, asking for a fresh one", msg.step)
            else:
                self.u_bar = self._advance(u)
                self.steps_since_fresh += 1
        return ProtocolMsg(MsgKind.OFFLINE_CONTROL, msg.step, {"u": [u]}, meta)

    def _advance(self, u: Ciphertext) -> EncVec:
        """u_bar <- [u_bar[m:], u_t], re-tiled: rotate, mask, place, tile."""
        ev, m, M = self.ev, self.m, self.M
        keep_old = np.arange(m * (M - 1))
        parts = []
        if M > 1:
            parts.append(mask(ev, ev.rot(self.u_bar.ct, m), keep_old))
        newest = mask(ev, u, np.arange(m))
        parts.append(ev.rot(newest, -m * (M - 1)) if M > 1 else newest)
        level = max(ct.level for ct in parts)
        window = parts[0] if len(parts) == 1 else ev.add(ev.drop_to(parts[0], level), ev.drop_to(parts[1], level))
        tiled = rotate_sum(ev, window, ev.slots // (m * M), -m * M)
        return self._vv(tiled, m * M)


class OfflineClient:
    def __init__(self, ctx: CKKSContext, keys: KeyMaterial, m: int, rng: np.random.Generator):
        self.ctx = ctx
        self.keys = keys
        self.m = m
        self.rng = rng
        self.need_window = True

    def _encrypt_tiled(self, x) -> Ciphertext:
        return self.ctx.encrypt(self.keys.pk, self.ctx.encode(make_encoding(x, Encoding.VV, n_slots=self.ctx.slots).slots), self.rng)

    def setup(self, gains: Gains) -> ProtocolMsg:
        diags = _gain_diagonals(gains)
        slots = self.ctx.slots
        cts = {}
        for name, ds in diags.items():
            cts[name] = [self.ctx.encrypt(self.keys.pk, self.ctx.encode(make_encoding(d, Encoding.V0, n_slots=slots).slots), self.rng) for d in ds]
        return ProtocolMsg(MsgKind.OFFLINE_SETUP, 0, cts)

    def measurement(self, step: int, r, y_bar, u_bar, resend_window: bool) -> ProtocolMsg:
        cts = {"r": [self._encrypt_tiled(r)], "y_bar": [self._encrypt_tiled(y_bar)]}
        if resend_window or self.need_window:
            cts["u_bar"] = [self._encrypt_tiled(u_bar)]
            self.need_window = False
        return ProtocolMsg(MsgKind.OFFLINE_MEASUREMENT, step, cts)

    def control(self, msg: ProtocolMsg) -> np.ndarray:
        if msg.kind is not MsgKind.OFFLINE_CONTROL:
            raise ProtocolError(f"expected OfflineControl, got {msg.kind.value}")
        if msg.meta.get("refresh"):
            self.need_window = True
        return self.ctx.decrypt_decode(self.keys.sk, msg.one("u"))[: self.m]


class OfflineEncryptedController:
    def __init__(self, client: OfflineClient, server: OfflineServer, channel: Channel, M: int, self_update: bool, clock: PartyClock | None = None):
        self.client = client
        self.server = server
        self.channel = channel
        self.M = M
        self.self_update = self_update
        self.clock = clock or PartyClock()
        self.columns = 0
        self.last_s = float("nan")

    def control(self, t: int, phase: Phase, u_hist: np.ndarray, y_hist: np.ndarray, r: np.ndarray) -> np.ndarray:
        name = phase.value
        self.clock.steps[name] += 1
        M = self.M
        with self.clock.measure("client", name):
            msg = self.client.measurement(t, r, y_hist[t - M : t].ravel(), u_hist[t - M : t].ravel(), not self.self_update)
        with self.clock.measure("server", name):
            reply = self.channel.send(self.server.step(self.channel.send(msg, C2S)), S2C)
        with self.clock.measure("client", name):
            return self.client.control(reply)


def run_offline_protocol(
    model: SystemModel,
    cfg: CtlConfig,
    he: HEConfig,
    reference,
    seed: int,
    steps: int,
    self_update: bool = False,
    offline: OfflineData | None = None,
) -> EncryptedRun:
    """Closed loop with encrypted offline gains (no online collection)."""
    cfg = cfg.model_copy(update={"T_bar": 0})
    streams: Streams = make_streams(seed)
    offline = offline or prepare_offline(model, cfg, streams.offline)
    if he.moduli < offline_required_moduli(1 if self_update else 0):
        raise BudgetExhaustedError(f"{he.moduli} moduli cannot host the offline-feedback circuit")
    gains = offline_gains(offline.hset, offline.M_inv, cfg)
    indices = offline_rotation_indices(model.m, model.p, cfg.M, cfg.N, he.slots, self_update)
    session = open_session(he, indices, streams.keys)
    channel = Channel(session.ctx)
    ledger = DepthLedger()
    client = OfflineClient(session.ctx, session.client_keys, model.m, streams.client)
    server = OfflineServer(session.ev, model.m, model.p, cfg.M, cfg.N, self_update, ledger)
    server.setup(channel.send(client.setup(gains), C2S))
    policy = OfflineEncryptedController(client, server, channel, cfg.M, self_update)
    policy.columns = offline.hset.S
    log = closed_loop(model, cfg, reference, streams, steps, policy)
    return EncryptedRun(log, channel.transcript, ledger, policy.clock, session, prunes=server.refreshes)
