"""Job runner behind the command line: simulations, analyses and benchmarks."""

import csv
import json
import logging
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Iterator

import numpy as np

from ..utils.i18n import tr
from ..utils.settings import Settings
from .analysis import closeness_sweep, default_path, schur_precision_profile
from .behavioral import Window, split_past_future
from .controller import OfflineData, RunLog, make_streams, prepare_offline, reference_batch, run_plain_loop
from .protocol import EncryptedRun, run_offline_protocol, run_online_protocol

logger = logging.getLogger(__name__)

ProgressCallback = Callable[[int, int, str], None]


class JobStopped(Exception):
    """Raised between stages once stop() was called."""


@contextmanager
def staged_output(out_dir: Path) -> Iterator[Path]:
    """
    Temporary directory whose files are moved into out_dir only when the block succeeds.
    """
    out_dir = Path(out_dir)
    with tempfile.TemporaryDirectory(prefix="cipherctl-") as tmp:
        staging = Path(tmp)
        yield staging
        out_dir.mkdir(parents=True, exist_ok=True)
        for item in staging.iterdir():
            target = out_dir / item.name
            if target.exists():
                target.unlink()
            shutil.move(str(item), str(target))


def write_summary(path: Path, summary: dict[str, Any]):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=float)
        f.write("\n")


def write_diff_csv(path: Path, plain: RunLog, enc: RunLog):
    du = enc.u - plain.u
    dy = enc.y - plain.y
    m, p = du.shape[1], dy.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["t"] + [f"du_{i}" for i in range(m)] + [f"dy_{i}" for i in range(p)])
        for t in range(plain.steps):
            writer.writerow([t] + [repr(float(v)) for v in du[t]] + [repr(float(v)) for v in dy[t]])


def peak_memory_mb() -> float | None:
    """Peak resident set size of this process; None where the resource module is missing (Windows)."""
    try:
        import resource
    except ImportError:
        return None
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    # bytes on macOS, kilobytes elsewhere
    return peak / (1024 * 1024) if sys.platform == "darwin" else peak / 1024


class SimulationWorker:
    """Runs one configured job and reports progress through optional callbacks."""

    def __init__(self, settings: Settings, progress: ProgressCallback | None = None, finished: Callable[[], None] | None = None):
        self.settings = settings
        self.config = settings.config
        self.progress = progress
        self.finished = finished
        self._should_stop = False

    def stop(self):
        """Stop before the next stage."""
        self._should_stop = True

    def _emit(self, current: int, total: int, message: str):
        if self._should_stop:
            raise JobStopped(message)
        logger.info("[%d/%d] %s", current, total, message)
        if self.progress is not None:
            self.progress(current, total, message)

    def _done(self):
        if self.finished is not None:
            self.finished()

    # -- shared setup --

    def _problem(self):
        model = self.settings.get_plant()
        cfg = self.settings.get_ctl_config()
        reference = self.settings.get_setpoint(model)
        offline = prepare_offline(model, cfg, make_streams(self.config.seed).offline)
        return model, cfg, reference, offline

    def _encrypted(self, model, cfg, reference, offline: OfflineData) -> EncryptedRun:
        he = self.settings.check_feasibility(model.m, model.p)
        c = self.config
        return run_online_protocol(model, cfg, he, reference, c.seed, c.steps, offline)

    # -- jobs --

    def simulate(self, out_dir: Path) -> dict[str, Any]:
        """Closed-loop run in the configured mode; writes trajectories, diffs and the transcript."""
        c = self.config
        total = 3 if c.mode == "paired" else 2
        try:
            self._emit(0, total, tr("progress_offline"))
            model, cfg, reference, offline = self._problem()
            summary: dict[str, Any] = {"mode": c.mode, "plant": model.name, "seed": c.seed}
            with staged_output(out_dir) as stage:
                plain = enc = None
                if c.mode in ("plain", "paired"):
                    self._emit(1, total, tr("progress_plain"))
                    plain = run_plain_loop(model, cfg, reference, c.seed, c.steps, offline)
                    plain.to_csv(stage / "trajectory_plain.csv")
                    summary["plain"] = plain.summary()
                if c.mode in ("encrypted", "paired"):
                    self._emit(total - 1, total, tr("progress_encrypted"))
                    run = self._encrypted(model, cfg, reference, offline)
                    enc = run.log
                    enc.to_csv(stage / "trajectory_encrypted.csv")
                    run.transcript.to_csv(stage / "transcript.csv")
                    summary["encrypted"] = {k: v for k, v in run.summary().items() if k != "per_step_seconds"}
                    summary["audit"] = run.transcript.audit()
                if plain is not None and enc is not None:
                    write_diff_csv(stage / "diff.csv", plain, enc)
                    summary["max_input_diff"] = float(np.max(np.abs(enc.u - plain.u)))
                    summary["max_output_diff"] = float(np.max(np.abs(enc.y - plain.y)))
                write_summary(stage / "summary.json", summary)
            self._emit(total, total, tr("progress_done"))
            return summary
        finally:
            self._done()

    def closeness(self, out_dir: Path) -> dict[str, Any]:
        c = self.config
        try:
            self._emit(0, 1, tr("progress_closeness"))
            model, cfg, reference, offline = self._problem()
            path = [tuple(pt) for pt in c.closeness_path] if c.closeness_path else default_path(c.closeness_k_max)
            w = Window.from_trajectory(offline.traj, cfg.M, cfg.M)
            r = reference_batch(reference, 0, cfg.N)
            report = closeness_sweep(offline.hset, w, r, cfg, path, self.settings.get_threads())
            with staged_output(out_dir) as stage:
                with open(stage / "closeness.csv", "w", newline="", encoding="utf-8") as f:
                    writer = csv.writer(f)
                    writer.writerow(["lambda_g", "lambda", "err"])
                    for lam_g, lam, err in report.sweep:
                        writer.writerow([repr(lam_g), repr(lam), repr(err)])
                summary = {
                    "plant": model.name,
                    "points": len(report.sweep),
                    "g_min_norm": float(np.linalg.norm(report.g_min)),
                    "final_err": report.err_star_min,
                    "g_bar_err": report.err_bar_min,
                }
                write_summary(stage / "summary.json", summary)
            self._emit(1, 1, tr("progress_done"))
            return summary
        finally:
            self._done()

    def precision(self, out_dir: Path) -> dict[str, Any]:
        """Precision profile of s/lambda_g for the newest offline column against the others."""
        try:
            self._emit(0, 1, tr("progress_precision"))
            model, cfg, _, offline = self._problem()
            hset = offline.hset
            rest = split_past_future(hset.HU[:, :-1], hset.HY[:, :-1], cfg.M, cfg.N)
            # the configured lambda_g always gets a row
            grid = np.union1d(self.config.precision_grid, [cfg.lambda_g])
            points = schur_precision_profile(rest, hset.HU[:, -1], hset.HY[:, -1], cfg, grid)
            with staged_output(out_dir) as stage:
                with open(stage / "precision.csv", "w", newline="", encoding="utf-8") as f:
                    writer = csv.writer(f)
                    writer.writerow(["lambda_g", "s", "s_over_lambda_g", "cancellation_bits"])
                    for pt in points:
                        writer.writerow([repr(pt.lambda_g), repr(pt.s), repr(pt.f), repr(pt.bits)])
                summary = {"plant": model.name, "points": len(points), "max_cancellation_bits": max(pt.bits for pt in points)}
                write_summary(stage / "summary.json", summary)
            self._emit(1, 1, tr("progress_done"))
            return summary
        finally:
            self._done()

    def bench(self, out_dir: Path) -> dict[str, Any]:
        """Per-phase wall time per party, ciphertext sizes by level and memory."""
        try:
            self._emit(0, 2, tr("progress_offline"))
            model, cfg, reference, offline = self._problem()
            self._emit(1, 2, tr("progress_encrypted"))
            if self.config.T_bar == 0:
                he = self.settings.check_feasibility(model.m, model.p)
                run = run_offline_protocol(model, cfg, he, reference, self.config.seed, self.config.steps, offline=offline)
            else:
                run = self._encrypted(model, cfg, reference, offline)
            sizes: dict[int, int] = {}
            for rec in run.transcript.records:
                if rec.digests and len(rec.digests) == 1:
                    sizes.setdefault(rec.level, rec.bytes)
            keys = run.session.client_keys
            key_bytes = len(run.session.ctx.serialize_key(keys.evk)) * (1 + len(keys.rot_keys))
            per_step = run.clock.per_step()
            with staged_output(out_dir) as stage:
                with open(stage / "bench.csv", "w", newline="", encoding="utf-8") as f:
                    writer = csv.writer(f)
                    writer.writerow(["phase", "party", "seconds_per_step"])
                    for phase, parties in sorted(per_step.items()):
                        for party, seconds in sorted(parties.items()):
                            writer.writerow([phase, party, f"{seconds:.6f}"])
                with open(stage / "ciphertext_sizes.csv", "w", newline="", encoding="utf-8") as f:
                    writer = csv.writer(f)
                    writer.writerow(["level", "bytes"])
                    for level in sorted(sizes):
                        writer.writerow([level, sizes[level]])
                run.transcript.to_csv(stage / "transcript.csv")
                summary = {
                    "plant": model.name,
                    "rotation_keys": run.session.rotation_keys,
                    "key_megabytes": key_bytes / 2**20,
                    "peak_memory_mb": peak_memory_mb(),
                    "per_step_seconds": per_step,
                    "ciphertext_bytes_by_level": sizes,
                }
                write_summary(stage / "summary.json", summary)
            self._emit(2, 2, tr("progress_done"))
            return summary
        finally:
            self._done()
