"""Readers and writers for every pipeline artifact.

Text artifacts are CSVs stamped with a leading comment naming the format
and the run's config hash, so downstream stages can refuse inputs from a
different configuration.  Floats are written with ``repr``, which
round-trips exactly; rerunning a stage with the same seed therefore
reproduces files byte for byte.  Large posterior blocks use raw
little-endian float64 with a JSON sidecar instead of a zip container,
whose embedded timestamps would break byte-identity.
"""

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .ingest import (
    DEMOGRAPHICS_HEADER,
    PANEL_HEADER,
    RISK_FACTORS,
    DayActivity,
    RiskFactorPanel,
)
from .mem import MemPosterior
from .predict import PredictiveCurve
from .preprocess import AdjustedActivity, VarianceFunction
from .rfm import RfmPosterior

FORMAT_VERSION = 1
STAMP_TOKEN = "# actimets"

CURVE_FACTORS = RISK_FACTORS[:4]
SLOPE_FACTORS = RISK_FACTORS[4:]


def float_repr(value) -> str:
    """Shortest decimal string that round-trips to the same float64."""
    return repr(float(value))


def config_hash(config: dict) -> str:
    """Stable 12-hex digest of a JSON-serializable configuration."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_json(path, obj):
    """Write JSON with sorted keys and a trailing newline (deterministic)."""
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"missing file {path}") from None
    except json.JSONDecodeError as err:
        raise DataError(f"{path}: invalid JSON: {err}") from None


def _stamp_line(kind, cfg_hash):
    return f"{STAMP_TOKEN} format={kind} version={FORMAT_VERSION} config_hash={cfg_hash}"


def read_stamp(path):
    """Parse the stamp of a CSV artifact without reading the body.

    Returns a dict with format, version, and config_hash, or None when the
    file has no stamp.
    """
    try:
        with open(path, newline="") as fh:
            first = fh.readline().rstrip("\n")
    except FileNotFoundError:
        raise DataError(f"missing file {path}") from None
    if not first.startswith(STAMP_TOKEN):
        return None
    meta = {}
    for token in first[len(STAMP_TOKEN) :].split():
        if "=" in token:
            key, value = token.split("=", 1)
            meta[key] = value
    return meta


def write_stamped_csv(path, kind, cfg_hash, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(_stamp_line(kind, cfg_hash) + "\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def read_stamped_csv(path, kind=None):
    """Read a stamped CSV; returns (meta, header, rows of strings)."""
    meta = read_stamp(path)
    if meta is None:
        raise DataError(f"{path}: missing format stamp")
    if kind is not None and meta.get("format") != kind:
        raise DataError(f"{path}: expected format {kind}, found {meta.get('format')}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row and not row[0].startswith("#")]
    if not rows:
        raise DataError(f"{path}: no header row")
    return meta, rows[0], rows[1:]


# -- binary array bundles ---------------------------------------------------


def save_arrays(bin_path, arrays, meta=None, cfg_hash=""):
    """Write named arrays to raw binary with a JSON sidecar manifest.

    Arrays are concatenated in sorted name order as little-endian blocks;
    the sidecar (same stem, .json) records dtype, shape, and byte offset.
    """
    bin_path = Path(bin_path)
    entries = []
    offset = 0
    with open(bin_path, "wb") as fh:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            dtype = arr.dtype.newbyteorder("<")
            data = arr.astype(dtype, copy=False).tobytes()
            fh.write(data)
            entries.append(
                {
                    "name": name,
                    "dtype": dtype.str,
                    "shape": list(arr.shape),
                    "offset": offset,
                }
            )
            offset += len(data)
    sidecar = {
        "version": FORMAT_VERSION,
        "config_hash": cfg_hash,
        "arrays": entries,
        "meta": meta or {},
    }
    write_json(bin_path.with_suffix(".json"), sidecar)


def load_arrays(bin_path):
    """Read a binary bundle back; returns (arrays dict, sidecar dict)."""
    bin_path = Path(bin_path)
    sidecar = read_json(bin_path.with_suffix(".json"))
    try:
        raw = bin_path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing file {bin_path}") from None
    arrays = {}
    for entry in sidecar["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(raw):
            raise DataError(f"{bin_path}: truncated block {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw[start:end], dtype=dtype).reshape(shape).copy()
    return arrays, sidecar


# -- day-level and participant-level tables ---------------------------------

DAYS_HEADER = ("participant_id", "day_index", "day_of_week", "wear_minutes", "mvpa_minutes")


def write_days_csv(path, days, cfg_hash):
    rows = [
        [d.participant_id, d.day_index, d.day_of_week, d.wear_minutes, float_repr(d.mvpa_minutes)]
        for d in days
    ]
    write_stamped_csv(path, "days", cfg_hash, DAYS_HEADER, rows)


def read_days_csv(path):
    _, header, rows = read_stamped_csv(path, "days")
    if tuple(header) != DAYS_HEADER:
        raise DataError(f"{path}: unexpected header")
    out = []
    for row in rows:
        if len(row) != 5:
            raise DataError(f"{path}: expected 5 fields, got {len(row)}")
        out.append(
            DayActivity(
                participant_id=row[0],
                day_index=int(row[1]),
                day_of_week=int(row[2]),
                wear_minutes=int(row[3]),
                mvpa_minutes=float(row[4]),
            )
        )
    return out


def write_demographics_csv(path, participants, cfg_hash):
    rows = [
        [p.participant_id, float_repr(p.age), p.sex, p.race, p.education, float_repr(p.bmi)]
        for p in participants
    ]
    write_stamped_csv(path, "demographics", cfg_hash, DEMOGRAPHICS_HEADER, rows)


def write_panels_csv(path, panels, cfg_hash):
    rows = [
        [p.participant_id]
        + [float_repr(v) for v in p.raw_values()]
        + [float_repr(p.survey_weight)]
        for p in panels
    ]
    write_stamped_csv(path, "risk_panels", cfg_hash, PANEL_HEADER, rows)


ADJUSTED_HEADER = ("participant_id", "day_index", "w1", "w")


def write_adjusted_csv(path, adjusted, cfg_hash):
    rows = [
        [a.participant_id, a.day_index, float_repr(a.w1), float_repr(a.w)] for a in adjusted
    ]
    write_stamped_csv(path, "adjusted_activity", cfg_hash, ADJUSTED_HEADER, rows)


def read_adjusted_csv(path):
    _, header, rows = read_stamped_csv(path, "adjusted_activity")
    if tuple(header) != ADJUSTED_HEADER:
        raise DataError(f"{path}: unexpected header")
    return [
        AdjustedActivity(
            participant_id=row[0], day_index=int(row[1]), w1=float(row[2]), w=float(row[3])
        )
        for row in rows
    ]


def save_variance_function(path, vf, cfg_hash):
    write_json(
        path,
        {
            "config_hash": cfg_hash,
            "delta": [float(d) for d in vf.delta],
            "floor": float(vf.floor),
        },
    )


def load_variance_function(path):
    obj = read_json(path)
    try:
        return VarianceFunction(delta=np.asarray(obj["delta"], dtype=float), floor=obj["floor"])
    except KeyError as err:
        raise DataError(f"{path}: missing key {err}") from None


# -- exposure pool and stage posteriors --------------------------------------


def write_t_draws_csv(path, participant_ids, pool, cfg_hash):
    """Pool of usual-activity vectors, one row per retained draw."""
    pool = np.asarray(pool, dtype=float)
    if pool.ndim != 2 or pool.shape[1] != len(participant_ids):
        raise DataError("pool misalignment with participant ids")
    rows = ([float_repr(v) for v in row] for row in pool)
    write_stamped_csv(path, "t_draws", cfg_hash, list(participant_ids), rows)


def read_t_draws_csv(path):
    _, header, rows = read_stamped_csv(path, "t_draws")
    pool = np.array([[float(v) for v in row] for row in rows])
    if pool.size == 0:
        raise DataError(f"{path}: empty draw pool")
    if pool.shape[1] != len(header):
        raise DataError(f"{path}: ragged rows")
    return tuple(header), pool


def save_mem_posterior(bin_path, posterior, cfg_hash):
    arrays = {
        "alpha": posterior.alpha,
        "beta": posterior.beta,
        "phi": posterior.phi,
        "sigma_b": posterior.sigma_b,
        "rho_b": posterior.rho_b,
        "t": posterior.t,
        "rhat": posterior.rhat,
    }
    if posterior.b1 is not None:
        arrays["b1"] = posterior.b1
        arrays["b2"] = posterior.b2
    meta = {
        "participant_ids": list(posterior.participant_ids),
        "parameter_names": list(posterior.parameter_names),
        "acceptance": {k: float(v) for k, v in posterior.acceptance.items()},
        "seed": posterior.seed,
    }
    save_arrays(bin_path, arrays, meta, cfg_hash)


def load_mem_posterior(bin_path):
    arrays, sidecar = load_arrays(bin_path)
    meta = sidecar["meta"]
    return MemPosterior(
        participant_ids=tuple(meta["participant_ids"]),
        parameter_names=tuple(meta["parameter_names"]),
        alpha=arrays["alpha"],
        beta=arrays["beta"],
        phi=arrays["phi"],
        sigma_b=arrays["sigma_b"],
        rho_b=arrays["rho_b"],
        t=arrays["t"],
        b1=arrays.get("b1"),
        b2=arrays.get("b2"),
        rhat=arrays["rhat"],
        acceptance=dict(meta["acceptance"]),
        seed=meta["seed"],
    )


def _rfm_columns(h):
    cols = ["chain", "t_index"]
    cols += [f"drop.{f}" for f in CURVE_FACTORS]
    cols += [f"rate.{f}" for f in CURVE_FACTORS]
    cols += [f"inflection.{f}" for f in CURVE_FACTORS]
    cols += [f"slope.{f}" for f in SLOPE_FACTORS]
    cols += [f"weight.{k}" for k in range(1, h + 1)]
    for k in range(1, h + 1):
        cols += [f"intercept.{k}.{f}" for f in RISK_FACTORS]
    for k in range(1, h + 1):
        for i in range(7):
            for j in range(i, 7):
                cols.append(f"cov.{k}.{RISK_FACTORS[i]}.{RISK_FACTORS[j]}")
    cols += [f"gamma0.{f}" for f in RISK_FACTORS]
    return cols


def save_rfm_posterior(csv_path, posterior, cfg_hash):
    """Write thinned, relabeled draws as CSV plus a labels bundle.

    The CSV carries every scalar parameter per draw; per-participant
    component labels and the run diagnostics go to a binary bundle next to
    it (same stem, .bin/.json).
    """
    csv_path = Path(csv_path)
    h = posterior.h
    iu = np.triu_indices(7)
    rows = []
    for l in range(posterior.n_draws):
        row = [int(posterior.chain[l]), int(posterior.t_index[l])]
        row += [float_repr(v) for v in posterior.drop[l]]
        row += [float_repr(v) for v in posterior.rate[l]]
        row += [float_repr(v) for v in posterior.inflection[l]]
        row += [float_repr(v) for v in posterior.slope[l]]
        row += [float_repr(v) for v in posterior.weights[l]]
        for k in range(h):
            row += [float_repr(v) for v in posterior.intercepts[l, k]]
        for k in range(h):
            row += [float_repr(v) for v in posterior.covariances[l, k][iu]]
        row += [float_repr(v) for v in posterior.gamma0[l]]
        rows.append(row)
    write_stamped_csv(csv_path, "rfm_posterior", cfg_hash, _rfm_columns(h), rows)
    meta = {
        "factor_names": list(posterior.factor_names),
        "rhat_names": list(posterior.rhat_names),
        "acceptance": {k: float(v) for k, v in posterior.acceptance.items()},
        "seed": posterior.seed,
        "relabeled": bool(posterior.relabeled),
        "dic": None if posterior.dic is None else float(posterior.dic),
    }
    save_arrays(
        csv_path.with_suffix(".bin"),
        {"labels": posterior.labels, "rhat": posterior.rhat},
        meta,
        cfg_hash,
    )


def load_rfm_posterior(csv_path):
    csv_path = Path(csv_path)
    _, header, rows = read_stamped_csv(csv_path, "rfm_posterior")
    h = sum(1 for c in header if c.startswith("weight."))
    if h == 0 or header != _rfm_columns(h):
        raise DataError(f"{csv_path}: unexpected column layout")
    data = np.array([[float(v) for v in row] for row in rows])
    if data.shape[0] == 0:
        raise DataError(f"{csv_path}: no draws")
    pos = 2
    def take(width):
        nonlocal pos
        block = data[:, pos : pos + width]
        pos += width
        return block

    drop, rate, inflection = take(4), take(4), take(4)
    slope = take(3)
    weights = take(h)
    intercepts = take(7 * h).reshape(-1, h, 7)
    n_draws = data.shape[0]
    covariances = np.empty((n_draws, h, 7, 7))
    iu = np.triu_indices(7)
    for k in range(h):
        packed = take(28)
        for l in range(n_draws):
            cov = np.zeros((7, 7))
            cov[iu] = packed[l]
            cov = cov + cov.T - np.diag(np.diag(cov))
            covariances[l, k] = cov
    gamma0 = take(7)
    arrays, sidecar = load_arrays(csv_path.with_suffix(".bin"))
    meta = sidecar["meta"]
    return RfmPosterior(
        factor_names=tuple(meta["factor_names"]),
        drop=drop,
        rate=rate,
        inflection=inflection,
        slope=slope,
        weights=weights,
        intercepts=intercepts,
        covariances=covariances,
        labels=arrays["labels"].astype(np.int16),
        t_index=data[:, 1].astype(np.int64),
        chain=data[:, 0].astype(np.int8),
        gamma0=gamma0,
        rhat=arrays["rhat"],
        rhat_names=tuple(meta["rhat_names"]),
        acceptance=dict(meta["acceptance"]),
        seed=meta["seed"],
        relabeled=bool(meta["relabeled"]),
        dic=meta["dic"],
    )


# -- report tables ------------------------------------------------------------

CURVES_HEADER = ("curve", "minutes", "estimate", "lower", "upper")


def write_curves_csv(path, curves, kind, cfg_hash):
    rows = []
    for curve in curves:
        for g, est, lo, up in zip(curve.grid, curve.estimate, curve.lower, curve.upper):
            rows.append(
                [curve.name, float_repr(g), float_repr(est), float_repr(lo), float_repr(up)]
            )
    write_stamped_csv(path, kind, cfg_hash, CURVES_HEADER, rows)


def read_curves_csv(path, kind):
    _, header, rows = read_stamped_csv(path, kind)
    if tuple(header) != CURVES_HEADER:
        raise DataError(f"{path}: unexpected header")
    grouped = {}
    order = []
    for row in rows:
        name = row[0]
        if name not in grouped:
            grouped[name] = []
            order.append(name)
        grouped[name].append([float(v) for v in row[1:]])
    curves = []
    for name in order:
        block = np.array(grouped[name])
        curves.append(
            PredictiveCurve(
                name=name,
                grid=block[:, 0],
                estimate=block[:, 1],
                lower=block[:, 2],
                upper=block[:, 3],
            )
        )
    return curves


RESIDUALS_HEADER = ("participant_id", "usual_mvpa") + tuple(f"r.{f}" for f in RISK_FACTORS)


def write_residuals_csv(path, participant_ids, t_hat, residuals, cfg_hash):
    residuals = np.asarray(residuals, dtype=float)
    rows = [
        [pid, float_repr(t)] + [float_repr(v) for v in res]
        for pid, t, res in zip(participant_ids, t_hat, residuals)
    ]
    write_stamped_csv(path, "residuals", cfg_hash, RESIDUALS_HEADER, rows)


DIC_HEADER = ("H", "dic", "selected")


def write_dic_csv(path, h_values, dics, cfg_hash):
    best = int(np.argmin(dics))
    rows = [
        [h, float_repr(d), int(i == best)] for i, (h, d) in enumerate(zip(h_values, dics))
    ]
    write_stamped_csv(path, "dic_by_H", cfg_hash, DIC_HEADER, rows)


def read_dic_csv(path):
    _, header, rows = read_stamped_csv(path, "dic_by_H")
    if tuple(header) != DIC_HEADER:
        raise DataError(f"{path}: unexpected header")
    h_values = [int(r[0]) for r in rows]
    dics = [float(r[1]) for r in rows]
    selected = [int(r[2]) for r in rows]
    if sum(selected) != 1:
        raise DataError(f"{path}: exactly one H must be flagged")
    return h_values, dics, h_values[selected.index(1)]


SUMMARY_HEADER = ("parameter", "risk_factor", "mean", "lower", "upper")


def write_summary_csv(path, rows, cfg_hash):
    formatted = [
        [name, rf, float_repr(mean), float_repr(lo), float_repr(up)]
        for name, rf, mean, lo, up in rows
    ]
    write_stamped_csv(path, "summary_tables", cfg_hash, SUMMARY_HEADER, formatted)


# -- run manifests ------------------------------------------------------------


def write_manifest(path, stage, cfg_hash, seed, inputs, outputs, wall_time_s):
    """Record a stage run: hashes of everything read and written.

    Wall time varies between runs, so manifests are excluded from
    byte-identity comparisons; every other artifact is deterministic.
    """
    write_json(
        path,
        {
            "stage": stage,
            "config_hash": cfg_hash,
            "seed": seed,
            "inputs": {str(k): sha256_file(k) for k in inputs},
            "outputs": {str(k): sha256_file(k) for k in outputs},
            "wall_time_s": wall_time_s,
            "version": FORMAT_VERSION,
        },
    )


def check_artifact(path, cfg_hash, stage):
    """Require a stamped artifact from the same configuration.

    Raises DataError naming the stage that must run first when the file is
    missing or was produced under a different config.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing {path.name}: run the {stage} stage first")
    meta = read_stamp(path)
    if meta is not None and cfg_hash and meta.get("config_hash") not in ("", cfg_hash):
        raise DataError(
            f"{path.name} was written under config {meta.get('config_hash')}, "
            f"not {cfg_hash}: rerun the {stage} stage"
        )
