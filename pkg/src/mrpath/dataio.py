"""Data ingestion and result serialization.

Summary data travel as TSV with the columns ``snp_id``, ``beta_exposure``,
``se_exposure``, ``beta_outcome``, ``se_outcome``.  Numeric fields are
serialized with shortest round-trip decimal representation, so a
write/read cycle is bit-exact.

Result files (results.json, posteriors.csv, trace.csv) reference the run
manifest through ``run_id``, a hash of the deterministic run inputs (input
data hash, configuration echo, seed, package version).  Timestamps and
timings live only in manifest.json, keeping every other artifact
byte-identical across reruns of the same command.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from pathlib import Path

import numpy as np

from . import __version__
from .mcem import FitResult
from .model import ModelError, SnpRecord, SummaryDataset

SCHEMA_VERSION = 1

REQUIRED_COLUMNS = (
    "snp_id",
    "beta_exposure",
    "se_exposure",
    "beta_outcome",
    "se_outcome",
)


class DataError(ValueError):
    """Malformed input data; maps to CLI exit code 2."""


def read_summary_tsv(path) -> SummaryDataset:
    """Parse a summary-statistics TSV into a SummaryDataset.

    The header is required.  Rows with non-finite values, non-positive
    standard errors, or unparseable numerics are rejected with the file
    line number (header is line 1).
    """
    path = Path(path)
    records = []
    seen = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        col = {c: header.index(c) for c in REQUIRED_COLUMNS}

        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise DataError(f"{path}: row {lineno}: expected {len(header)} fields")
            snp_id = row[col["snp_id"]].strip()
            if not snp_id:
                raise DataError(f"{path}: row {lineno}: empty snp_id")
            if snp_id in seen:
                raise DataError(
                    f"{path}: row {lineno}: duplicate snp_id {snp_id!r} "
                    f"(first seen on row {seen[snp_id]})"
                )
            seen[snp_id] = lineno
            vals = {}
            for name in REQUIRED_COLUMNS[1:]:
                raw = row[col[name]].strip()
                try:
                    vals[name] = float(raw)
                except ValueError:
                    raise DataError(
                        f"{path}: row {lineno}: column {name}: "
                        f"unparseable numeric {raw!r}"
                    ) from None
                if not np.isfinite(vals[name]):
                    raise DataError(
                        f"{path}: row {lineno}: column {name}: non-finite value"
                    )
            for name in ("se_exposure", "se_outcome"):
                if vals[name] <= 0:
                    raise DataError(
                        f"{path}: row {lineno}: column {name}: "
                        f"standard error must be positive, got {vals[name]!r}"
                    )
            records.append(
                SnpRecord(
                    snp_id,
                    vals["beta_exposure"],
                    vals["se_exposure"],
                    vals["beta_outcome"],
                    vals["se_outcome"],
                )
            )
    if not records:
        raise DataError(f"{path}: no data rows")
    try:
        return SummaryDataset(records)
    except ModelError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_summary_tsv(path, data: SummaryDataset):
    """Write a dataset with full-precision decimal fields."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(REQUIRED_COLUMNS)
        for r in data.records:
            writer.writerow(
                [r.snp_id, repr(r.theta_x_hat), repr(r.sigma_x),
                 repr(r.theta_y_hat), repr(r.sigma_y)]
            )


def write_truth_csv(path, sim_output):
    """Ground-truth latents of a simulated dataset, one row per SNP."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["snp_id", "theta_x", "beta", "cluster", "alpha"])
        for rec, lat, alpha in zip(
            sim_output.dataset.records, sim_output.truth, sim_output.alphas
        ):
            writer.writerow(
                [rec.snp_id, repr(lat.theta_x), repr(lat.beta),
                 lat.cluster, repr(float(alpha))]
            )


# ---------------------------------------------------------------------------
# Run manifest and result files
# ---------------------------------------------------------------------------


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def build_manifest(input_path, config_echo: dict, seed: int) -> dict:
    """Deterministic manifest core; run_id hashes exactly these fields."""
    core = {
        "schema_version": SCHEMA_VERSION,
        "software": {"name": "mrpath", "version": __version__},
        "input": {
            "path": str(input_path),
            "sha256": file_sha256(input_path) if input_path else None,
        },
        "config": config_echo,
        "seed": seed,
    }
    run_id = hashlib.sha256(
        json.dumps(core, sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]
    core["run_id"] = run_id
    return core


def finalize_manifest(manifest: dict, timings: dict, diagnostics: list) -> dict:
    manifest = dict(manifest)
    manifest["timings_sec"] = timings
    manifest["diagnostics"] = diagnostics
    manifest["created_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    return manifest


def _fit_payload(fit: FitResult) -> dict:
    payload = {
        "k": fit.k,
        "p": fit.p,
        "seed": fit.seed,
        "converged": fit.converged,
        "q_tilde": fit.q_tilde_final,
        "bic": fit.bic,
        "m_final": fit.m_final,
        "n_iterations": fit.n_iterations,
        "best_restart": fit.best_restart,
        "n_restarts": fit.n_restarts,
        "params": fit.params.to_dict(),
    }
    if fit.cis is not None:
        payload["level"] = fit.cis.level
        payload["intervals"] = [
            {
                "name": e.name,
                "estimate": e.estimate,
                "se": e.se,
                "lower": e.lower,
                "upper": e.upper,
                "note": e.note,
            }
            for e in fit.cis.entries
        ]
    return payload


def write_results(
    out_dir,
    fit: FitResult,
    posteriors=None,
    selection=None,
    manifest: dict | None = None,
    timings: dict | None = None,
) -> dict:
    """Emit results.json, trace.csv, optional posteriors.csv, manifest.json.

    Returns a mapping of artifact name to path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if manifest is None:
        manifest = build_manifest(None, {}, fit.seed)
    run_id = manifest["run_id"]
    artifacts = {}

    results = {
        "schema_version": SCHEMA_VERSION,
        "run_id": run_id,
        "fit": _fit_payload(fit),
    }
    if selection is not None:
        results["selection"] = {
            "candidates": selection.candidates,
            "bic_table": {str(k): selection.bics[k] for k in selection.candidates},
            "chosen_k": selection.chosen_k,
            "failed": selection.failed,
            "tie_break": selection.tie_break,
        }
    results_path = out_dir / "results.json"
    with open(results_path, "w") as fh:
        json.dump(results, fh, indent=2)
        fh.write("\n")
    artifacts["results"] = results_path

    trace_path = out_dir / "trace.csv"
    with open(trace_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        k = fit.k
        header = ["run_id", "iteration", "m", "accepted", "n_rejected_attempts",
                  "delta_q", "eta_hat", "q_tilde"]
        header += [f"weight_{j + 1}" for j in range(k)]
        header += [f"mean_{j + 1}" for j in range(k)]
        header += [f"variance_{j + 1}" for j in range(k)]
        header += ["nu_x", "lambda2_x"]
        writer.writerow(header)
        for rec in fit.trace:
            row = [run_id, rec.iteration, rec.m, int(rec.accepted),
                   rec.n_rejected_attempts, repr(rec.delta_q), repr(rec.eta_hat),
                   repr(rec.q_tilde)]
            row += [repr(float(v)) for v in rec.params.weights]
            row += [repr(float(v)) for v in rec.params.means]
            row += [repr(float(v)) for v in rec.params.variances]
            row += [repr(rec.params.exposure_mean), repr(rec.params.exposure_variance)]
            writer.writerow(row)
    artifacts["trace"] = trace_path

    if posteriors is not None:
        artifacts["posteriors"] = write_posteriors_csv(
            out_dir / "posteriors.csv", posteriors, run_id
        )

    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(
            finalize_manifest(manifest, timings or {}, list(fit.diagnostics)),
            fh,
            indent=2,
        )
        fh.write("\n")
    artifacts["manifest"] = manifest_path
    return artifacts


def write_posteriors_csv(path, posteriors, run_id: str):
    path = Path(path)
    k = posteriors[0].membership_probs.size if posteriors else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["run_id", "snp_id"]
        header += [f"prob_cluster_{j + 1}" for j in range(k)]
        header += ["beta_median", "beta_lower", "beta_upper",
                   "assigned_cluster", "n_resamples"]
        writer.writerow(header)
        for s in posteriors:
            row = [run_id, s.snp_id]
            row += [repr(float(v)) for v in s.membership_probs]
            row += [repr(s.beta_median), repr(s.beta_ci[0]), repr(s.beta_ci[1]),
                    s.assigned_cluster, s.n_resamples]
            writer.writerow(row)
    return path


def read_results(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
