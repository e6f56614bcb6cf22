"""Linear prefill/decode time models and their least-squares fitting.

Prefill time for a batch is linear in batch size and the batch's longest
input; each decode iteration is linear in batch size and the current cached
length. Summing iterations gives a closed form that is still linear in the
four decode coefficients, so both models fit with ordinary least squares.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import FitError, RankDeficientError, TraceError

__all__ = [
    "LatencyParams",
    "ProfilingSample",
    "FitDiagnostics",
    "prefill_time",
    "decode_iteration_time",
    "decode_time",
    "fit_params",
    "FittedRecord",
    "read_samples",
    "write_samples",
    "read_params_file",
    "write_params_file",
]

_RIDGE = 1e-12


@dataclass(frozen=True)
class LatencyParams:
    """Fitted coefficients of the two linear time models (seconds scale).

    p1..p4 price a prefill pass: p1*b*I + p2*b + p3*I + p4.
    p5..p8 price one decode iteration: p5*b*cached + p6*b + p7*cached + p8.
    """

    p1: float
    p2: float
    p3: float
    p4: float
    p5: float
    p6: float
    p7: float
    p8: float

    def as_tuple(self) -> tuple[float, ...]:
        return (self.p1, self.p2, self.p3, self.p4, self.p5, self.p6, self.p7, self.p8)

    def scaled(self, alpha: float) -> "LatencyParams":
        """Uniformly scale all coefficients (an alpha-times-slower instance)."""
        return LatencyParams(*(alpha * p for p in self.as_tuple()))


@dataclass(frozen=True)
class ProfilingSample:
    """One profiled batch: sizes, lengths, and the measured wall seconds."""

    batch_size: int
    input_len: int
    output_len: int
    seconds: float

    def __post_init__(self):
        if self.batch_size < 1 or self.input_len < 1 or self.output_len < 1 or self.seconds <= 0:
            raise FitError(f"profiling sample fields must be positive: {self}")


@dataclass(frozen=True)
class FitDiagnostics:
    """Residual norms, conditioning, and sanity flags from a fit."""

    prefill_residual_norm: float
    decode_residual_norm: float
    prefill_condition: float
    decode_condition: float
    nonpositive_prediction: bool

    @property
    def residual_norm(self) -> float:
        return float(np.hypot(self.prefill_residual_norm, self.decode_residual_norm))


def prefill_time(params: LatencyParams, batch_size: int, input_len: int) -> float:
    """Seconds to prefill a batch of ``batch_size`` with longest input ``input_len``."""
    return params.p1 * batch_size * input_len + params.p2 * batch_size + params.p3 * input_len + params.p4


def decode_iteration_time(params: LatencyParams, cached_len: int, batch_size: int) -> float:
    """Seconds for one decode iteration at the given cached length and batch size."""
    return params.p5 * batch_size * cached_len + params.p6 * batch_size + params.p7 * cached_len + params.p8


def decode_time(params: LatencyParams, batch_size: int, input_len: int, output_len: int) -> float:
    """Seconds to decode ``output_len`` tokens; closed form of the per-iteration sum.

    Token k is generated with cached length input_len + k, so the sum over
    k = 1..O telescopes to S = O*I + O*(O+1)/2 in the cached-length terms.
    """
    cached_sum = output_len * input_len + output_len * (output_len + 1) / 2.0
    return (params.p5 * batch_size + params.p7) * cached_sum + (
        params.p6 * batch_size + params.p8
    ) * output_len


def _decode_features(b: np.ndarray, i: np.ndarray, o: np.ndarray) -> np.ndarray:
    s = o * i + o * (o + 1) / 2.0
    return np.column_stack([b * s, b * o, s, o])


def _prefill_features(b: np.ndarray, i: np.ndarray) -> np.ndarray:
    return np.column_stack([b * i, b, i, np.ones_like(b, dtype=float)])


def _check_variation(samples: list[ProfilingSample], phase: str) -> None:
    if len(samples) < 4:
        raise FitError(f"{phase}: need at least 4 samples to fit 4 coefficients, got {len(samples)}")
    if len({s.batch_size for s in samples}) < 2:
        raise RankDeficientError(
            f"{phase}: all samples share one batch_size; vary it to identify the batch terms",
            dimension="batch_size",
        )
    if len({s.input_len for s in samples}) < 2:
        raise RankDeficientError(
            f"{phase}: all samples share one input_len; vary it to identify the length terms",
            dimension="input_len",
        )


def _solve(design: np.ndarray, target: np.ndarray, phase: str) -> tuple[np.ndarray, float, float]:
    # Columns span wildly different scales (b*I vs the constant term), so
    # normalize before forming the normal equations; the ridge then only has
    # to stabilize a well-scaled 4x4 system.
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise RankDeficientError(f"{phase}: design matrix is rank-deficient")
    col_scale = np.sqrt(np.mean(design**2, axis=0))
    col_scale[col_scale == 0] = 1.0
    scaled = design / col_scale
    gram = scaled.T @ scaled
    ridge = _RIDGE * (np.trace(gram) / gram.shape[0])
    coef_scaled = np.linalg.solve(gram + ridge * np.eye(gram.shape[0]), scaled.T @ target)
    coef = coef_scaled / col_scale
    residual = float(np.linalg.norm(design @ coef - target))
    condition = float(np.linalg.cond(scaled))
    return coef, residual, condition


def fit_params(
    prefill_samples: list[ProfilingSample],
    decode_samples: list[ProfilingSample],
) -> tuple[LatencyParams, FitDiagnostics]:
    """Least-squares fit of the eight time-model coefficients.

    Decode samples are whole-batch decode totals, matching what a profiler can
    actually record, and are fitted against the closed-form sum. Negative
    coefficients are allowed, but any fitted model predicting a non-positive
    time on its own profiling grid is flagged in the diagnostics; consumers
    treat that flag as a hard error.
    """
    _check_variation(prefill_samples, "prefill")
    _check_variation(decode_samples, "decode")

    pb = np.array([s.batch_size for s in prefill_samples], dtype=float)
    pi = np.array([s.input_len for s in prefill_samples], dtype=float)
    py = np.array([s.seconds for s in prefill_samples], dtype=float)
    p_coef, p_res, p_cond = _solve(_prefill_features(pb, pi), py, "prefill")

    db = np.array([s.batch_size for s in decode_samples], dtype=float)
    di = np.array([s.input_len for s in decode_samples], dtype=float)
    do = np.array([s.output_len for s in decode_samples], dtype=float)
    dy = np.array([s.seconds for s in decode_samples], dtype=float)
    d_coef, d_res, d_cond = _solve(_decode_features(db, di, do), dy, "decode")

    params = LatencyParams(*p_coef, *d_coef)
    nonpositive = any(
        prefill_time(params, s.batch_size, s.input_len) <= 0 for s in prefill_samples
    ) or any(
        decode_time(params, s.batch_size, s.input_len, s.output_len) <= 0 for s in decode_samples
    )
    diagnostics = FitDiagnostics(
        prefill_residual_norm=p_res,
        decode_residual_norm=d_res,
        prefill_condition=p_cond,
        decode_condition=d_cond,
        nonpositive_prediction=nonpositive,
    )
    return params, diagnostics


@dataclass(frozen=True)
class FittedRecord:
    """One fitted-parameter file entry, keyed by machine and tp degree."""

    machine_name: str
    tp_degree: int
    params: LatencyParams
    residual_norm: float


def read_samples(text: str) -> tuple[list[ProfilingSample], list[ProfilingSample]]:
    """Parse a profiling sample file into (prefill, decode) sample lists."""
    prefill: list[ProfilingSample] = []
    decode: list[ProfilingSample] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
            phase = record["phase"]
            sample = ProfilingSample(
                batch_size=int(record["batch_size"]),
                input_len=int(record["input_len"]),
                output_len=int(record["output_len"]),
                seconds=float(record["seconds"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise TraceError(f"samples line {lineno}: invalid record: {exc}") from exc
        if sample.batch_size < 1 or sample.input_len < 1 or sample.output_len < 1 or sample.seconds <= 0:
            raise TraceError(f"samples line {lineno}: fields must be positive")
        if phase == "prefill":
            prefill.append(sample)
        elif phase == "decode":
            decode.append(sample)
        else:
            raise TraceError(f"samples line {lineno}: phase must be 'prefill' or 'decode', got {phase!r}")
    return prefill, decode


def write_samples(prefill: list[ProfilingSample], decode: list[ProfilingSample]) -> str:
    lines = []
    for phase, samples in (("prefill", prefill), ("decode", decode)):
        for s in samples:
            lines.append(
                json.dumps(
                    {
                        "phase": phase,
                        "batch_size": s.batch_size,
                        "input_len": s.input_len,
                        "output_len": s.output_len,
                        "seconds": s.seconds,
                    },
                    sort_keys=True,
                )
            )
    return "\n".join(lines) + ("\n" if lines else "")


def write_params_file(records: list[FittedRecord]) -> str:
    """Serialize fitted-parameter records as line-delimited JSON."""
    lines = []
    for r in records:
        payload = {"machine_name": r.machine_name, "tp_degree": r.tp_degree}
        payload.update({f"p{k}": v for k, v in zip(range(1, 9), r.params.as_tuple())})
        payload["residual_norm"] = r.residual_norm
        lines.append(json.dumps(payload, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def read_params_file(text: str) -> dict[tuple[str, int], LatencyParams]:
    """Parse a fitted-parameter file into a {(machine, tp_degree): params} map."""
    table: dict[tuple[str, int], LatencyParams] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
            key = (str(record["machine_name"]), int(record["tp_degree"]))
            params = LatencyParams(*(float(record[f"p{k}"]) for k in range(1, 9)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise TraceError(f"params line {lineno}: invalid record: {exc}") from exc
        if key in table:
            raise TraceError(f"params line {lineno}: duplicate entry for machine={key[0]} tp={key[1]}")
        table[key] = params
    return table
