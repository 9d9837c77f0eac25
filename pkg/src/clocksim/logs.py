"""Run output files, hashing, and replay verification.

Every run writes a fixed set of files into one output directory:

    side_outcomes.jsonl   one JSON object per side interrogation
    reports.jsonl         one JSON object per reporting period
    shuttle_events.jsonl  loader and shuttle events
    series.csv            per-cycle corrections (t_s, df1_hz, df2_hz)
    manifest.json         config hash, seed, and sha256 of every file

Each data file starts with a ``# manifest: <config_hash>`` header line so
a stray file can be traced to the configuration that produced it. The
manifest stores the sha256 of each complete file; ``verify_outputs``
recomputes them. Nothing here depends on wall-clock time, so two runs of
the same configuration produce byte-identical directories.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from clocksim import __version__
from clocksim.analysis import FrequencySeries
from clocksim.config import config_hash, config_to_dict

SIDE_FILE = "side_outcomes.jsonl"
REPORT_FILE = "reports.jsonl"
SHUTTLE_FILE = "shuttle_events.jsonl"
SERIES_FILE = "series.csv"
MANIFEST_FILE = "manifest.json"


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def side_outcome_record(outcome):
    """JSON-safe dict for one SideOutcome."""
    return {
        "side": outcome.side,
        "integrator_id": outcome.integrator_id,
        "timestamp": outcome.timestamp,
        "per_site_n": {str(site): n for site, n in sorted(outcome.per_site_n.items())},
        "applied_detuning_hz": outcome.applied_detuning_hz,
    }


def report_record(record):
    """JSON-safe dict for one ReportRecord."""
    return {
        "period_index": record.period_index,
        "per_site_sums": {
            str(site): {str(ig): list(sums) for ig, sums in by_ig.items()}
            for site, by_ig in sorted(record.per_site_sums.items())
        },
        "present": {str(site): bool(v) for site, v in sorted(record.present.items())},
        "df1": record.df1,
        "df2": record.df2,
        "timestamp": record.timestamp,
    }


class _HashingFile:
    """Text file writer that folds every byte into a sha256 digest."""

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8", newline="\n")
        self._hash = hashlib.sha256()
        self.lines = 0

    def write_line(self, text):
        data = text + "\n"
        self._fh.write(data)
        self._hash.update(data.encode("utf-8"))
        self.lines += 1

    def close(self):
        self._fh.close()
        return self._hash.hexdigest()


class OutputWriter:
    """Streams run outputs to disk and finalizes the manifest.

    Use the sink methods as callbacks for run_clock and the shuttle
    manager; call ``finalize`` with the RunResult (or with
    ``aborted=True`` after an interlock abort) to write series.csv and
    manifest.json.
    """

    def __init__(self, out_dir, config):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.config = config
        self.config_hash = config_hash(config)
        self._files = {}
        self._digests = {}
        for name in (SIDE_FILE, REPORT_FILE, SHUTTLE_FILE):
            fh = _HashingFile(os.path.join(out_dir, name))
            fh.write_line(f"# manifest: {self.config_hash}")
            self._files[name] = fh

    def side_sink(self, outcome):
        self._files[SIDE_FILE].write_line(_dumps(side_outcome_record(outcome)))

    def report_sink(self, record):
        self._files[REPORT_FILE].write_line(_dumps(report_record(record)))

    def shuttle_sink(self, event):
        self._files[SHUTTLE_FILE].write_line(_dumps(event))

    def _write_series(self, series):
        fh = _HashingFile(os.path.join(self.out_dir, SERIES_FILE))
        fh.write_line(f"# manifest: {self.config_hash}")
        fh.write_line(f"# nu_hz: {series.reference_frequency!r}")
        fh.write_line("t_s,df1_hz,df2_hz")
        t_step = series.sample_period
        for i, (a, b) in enumerate(zip(series.df1, series.df2)):
            fh.write_line(f"{(i + 1) * t_step!r},{float(a)!r},{float(b)!r}")
        self._digests[SERIES_FILE] = {"sha256": fh.close(), "lines": fh.lines}

    def finalize(self, result=None, aborted=False, error=None):
        """Close all data files and write manifest.json."""
        if result is not None:
            self._write_series(result.series)
        for name, fh in self._files.items():
            self._digests[name] = {"sha256": fh.close(), "lines": fh.lines}
        self._files = {}

        manifest = {
            "format": "clocksim-run/1",
            "version": __version__,
            "config_hash": self.config_hash,
            "config": config_to_dict(self.config),
            "aborted": bool(aborted),
            "files": {name: self._digests[name] for name in sorted(self._digests)},
        }
        if error is not None:
            manifest["error"] = str(error)
        if result is not None:
            manifest["n_cycles"] = result.n_cycles
            manifest["occupancy"] = result.occupancy
            manifest["final_integrators"] = [
                {"integrator_id": s.integrator_id, "i1": s.i1, "i2": s.i2}
                for s in result.final_integrators
            ]
        path = os.path.join(self.out_dir, MANIFEST_FILE)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
            fh.write("\n")
        return manifest


def read_manifest(out_dir):
    with open(os.path.join(out_dir, MANIFEST_FILE), encoding="utf-8") as fh:
        return json.load(fh)


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def verify_outputs(out_dir):
    """Check every file in the manifest against its recorded sha256.

    Also checks that each data file's header names the manifest's config
    hash. Returns a list of problem strings; empty means verified.
    """
    problems = []
    try:
        manifest = read_manifest(out_dir)
    except (OSError, json.JSONDecodeError) as exc:
        return [f"manifest unreadable: {exc}"]
    expect_hash = manifest.get("config_hash", "")
    for name, entry in manifest.get("files", {}).items():
        path = os.path.join(out_dir, name)
        if not os.path.exists(path):
            problems.append(f"{name}: missing")
            continue
        actual = file_sha256(path)
        if actual != entry.get("sha256"):
            problems.append(f"{name}: sha256 mismatch")
            continue
        with open(path, encoding="utf-8") as fh:
            first = fh.readline().rstrip("\n")
        if first != f"# manifest: {expect_hash}":
            problems.append(f"{name}: header does not name the manifest config hash")
    return problems


def report_from_record(record):
    """Rebuild a ReportRecord from its JSONL dict (keys back to ints)."""
    from clocksim.servo import ReportRecord

    return ReportRecord(
        period_index=record["period_index"],
        per_site_sums={
            int(site): {int(ig): tuple(sums) for ig, sums in by_ig.items()}
            for site, by_ig in record["per_site_sums"].items()
        },
        present={int(site): bool(v) for site, v in record["present"].items()},
        df1=record["df1"],
        df2=record["df2"],
        timestamp=record["timestamp"],
    )


def read_jsonl(path):
    """Load a headered JSONL file into a list of dicts."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            out.append(json.loads(line))
    return out


def read_series(path):
    """Load a series.csv back into a FrequencySeries."""
    nu = None
    t = []
    df1 = []
    df2 = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# nu_hz:"):
                nu = float(line.split(":", 1)[1])
                continue
            if not line or line.startswith("#") or line.startswith("t_s"):
                continue
            a, b, c = line.split(",")
            t.append(float(a))
            df1.append(float(b))
            df2.append(float(c))
    if nu is None:
        raise ValueError(f"{path} has no '# nu_hz:' header")
    if len(t) < 2:
        raise ValueError(f"{path} holds fewer than two samples")
    period = t[1] - t[0]
    return FrequencySeries(
        sample_period=period,
        df1=np.asarray(df1),
        df2=np.asarray(df2),
        reference_frequency=nu,
    )
