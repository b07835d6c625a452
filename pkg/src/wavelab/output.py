"""Output files: CSV time series, JSONL reports and the run manifest."""

import csv
import hashlib
import json
import os

import numpy as np


def fmt(x):
    """Shortest round-trip text for a float ('nan' and 'inf' spelled out)."""
    return repr(float(x))


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else None
    return obj


class OutputDir:
    """Single-writer output directory; tracks every file it writes."""

    def __init__(self, path):
        self.path = path
        os.makedirs(path, exist_ok=True)
        self.files = []

    def _target(self, name):
        self.files.append(name)
        return os.path.join(self.path, name)

    def write_csv(self, name, header, rows):
        with open(self._target(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(x) for x in row])

    def write_series(self, name, times, u, v=None, prefix=("u", "v")):
        u = np.atleast_2d(u)
        header = ["t"] + [f"{prefix[0]}_{k}" for k in range(1, u.shape[1] + 1)]
        cols = [np.asarray(times)[:, None], u]
        if v is not None:
            header += [f"{prefix[1]}_{k}" for k in range(1, v.shape[1] + 1)]
            cols.append(np.atleast_2d(v))
        self.write_csv(name, header, np.hstack(cols))

    def write_jsonl(self, name, records):
        with open(self._target(name), "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(_clean(rec), sort_keys=True) + "\n")

    def checksums(self):
        out = {}
        for name in self.files:
            with open(os.path.join(self.path, name), "rb") as fh:
                out[name] = hashlib.sha256(fh.read()).hexdigest()
        return out

    def write_manifest(self, cfg, command, version, wall_clock, abort_counts, status, exit_code):
        """Written last: its presence marks a completed run."""
        manifest = {
            "command": command,
            "artifact_version": version,
            "config_hash": cfg.hash(),
            "config": cfg.source,
            "resolved_config": cfg.tables,
            "abort_counts": abort_counts,
            "status": status,
            "exit_code": exit_code,
            "files": self.checksums(),
            "wall_clock_seconds": wall_clock,
        }
        tmp = os.path.join(self.path, "manifest.json.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(_clean(manifest), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, os.path.join(self.path, "manifest.json"))
        return manifest
