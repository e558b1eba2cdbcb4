"""Experiment orchestration: batched seeded trajectories, archives, presets.

An experiment writes a self-describing archive directory:

    config.json     flat configuration snapshot (schema-versioned)
    rows.jsonl      one JSON row per trajectory: seed, config snapshot,
                    full event record, per-round observables; a final
                    {"summary": ...} line repeats the aggregates
    series.csv      per-round observable time series, one line per
                    (trajectory, round), round 0 being the initial state
    summary.json    aggregate statistics
    qnd_report.json projector-equivalence certification (optical backend)

Rows are exactly replayable: per-trajectory seeds derive from the master
seed by a fixed mixing function, and JSON serialization round-trips floats
bit-exactly, so a replay must reproduce the archived event list.
"""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .hilbert import EnsembleShape, PureState
from .multiplets import multiplet_counts
from .protocol import (
    MeasurementEvent,
    ProtocolConfig,
    RoundRecord,
    TrajectoryResult,
    make_initial_state,
    run_procedure,
)
from .qnd import OpticalSettings, QndMeasurement, effective_projector_check, \
    recommended_settings
from .sampler import RandomStream, derive_seed

SCHEMA_VERSION = 1
CLUSTER_POINTS = ((1.0, 0.0), (0.25, 0.75))
CLUSTER_TOLERANCE = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment description; every field maps to one config-file key."""
    n_particles: int = 4
    two_j: int = 1
    initial: str = "completely-mixed"      # or "y-polarized-coherent"
    mode: str = "auto"                     # density | unraveling | auto
    m_cut: float | None = None             # None: 0, or 1/2 when N*2j is odd
    convergence_streak: int = 5
    settle_streak: int = 20
    max_rounds: int = 100
    max_sequence_steps: int = 10_000
    rotation_rule: str = "arcsin"
    subensemble_policy: str = "random-half"
    sampler: str = "exact"
    backend: str = "ideal"                 # or "qnd"
    qnd_photon_number: float = 650.0
    qnd_gamma_abs: float | None = None
    qnd_chi_abs: float | None = None
    qnd_gamma_arg: float = 0.0
    qnd_chi_arg: float = 0.0
    qnd_gt: float | None = None
    qnd_phi_p: float = 0.0
    qnd_window_sd: float = 6.0
    trajectories: int = 100
    seed: int = 11
    workers: int | None = None
    preset: str | None = None

    def validate(self) -> list[str]:
        """All problems found in one pass (empty list means valid)."""
        errors = []
        if self.n_particles < 1:
            errors.append("n_particles must be positive")
        if self.two_j < 1:
            errors.append("two_j must be a positive integer (twice the spin)")
        if self.initial not in ("completely-mixed", "y-polarized-coherent"):
            errors.append(f"unknown initial state {self.initial!r}")
        if self.mode not in ("auto", "density", "unraveling"):
            errors.append(f"unknown mode {self.mode!r}")
        if self.mode == "unraveling" and self.initial != "completely-mixed":
            errors.append("unraveling mode applies only to the completely mixed start")
        if self.backend not in ("ideal", "qnd"):
            errors.append(f"unknown backend {self.backend!r}")
        if self.sampler not in ("exact", "accept-reject"):
            errors.append(f"unknown sampler {self.sampler!r}")
        if self.trajectories < 1:
            errors.append("trajectories must be positive")
        if self.seed < 0 or self.seed >= 2 ** 64:
            errors.append("seed must fit in 64 bits")
        mc = self.resolved_m_cut()
        if mc < 0 or abs(2 * mc - round(2 * mc)) > 1e-9:
            errors.append("m_cut must be a nonnegative half-integer")
        if self.convergence_streak < 2:
            errors.append("convergence_streak must be at least 2")
        if self.settle_streak < self.convergence_streak:
            errors.append("settle_streak must be >= convergence_streak")
        if self.max_rounds < 1 or self.max_sequence_steps < 1:
            errors.append("round and step caps must be positive")
        return errors

    def resolved_m_cut(self) -> float:
        if self.m_cut is not None:
            return self.m_cut
        return 0.5 if (self.n_particles * self.two_j) % 2 else 0.0

    def resolved_mode(self) -> str:
        if self.initial != "completely-mixed":
            return "pure"
        if self.mode != "auto":
            return self.mode
        return "density" if (self.two_j + 1) ** self.n_particles <= 1024 \
            else "unraveling"

    def protocol_config(self) -> ProtocolConfig:
        return ProtocolConfig(
            m_cut=self.resolved_m_cut(),
            convergence_streak=self.convergence_streak,
            settle_streak=self.settle_streak,
            max_rounds=self.max_rounds,
            max_sequence_steps=self.max_sequence_steps,
            rotation_rule=self.rotation_rule,
            subensemble_policy=self.subensemble_policy,
            sampler=self.sampler,
        )

    def optical_settings(self) -> OpticalSettings:
        shape = _shape(self.n_particles, self.two_j)
        base = recommended_settings(shape, self.qnd_photon_number)
        gamma_abs = self.qnd_gamma_abs if self.qnd_gamma_abs is not None \
            else abs(base.gamma)
        chi_abs = self.qnd_chi_abs if self.qnd_chi_abs is not None else abs(base.chi)
        gt = self.qnd_gt if self.qnd_gt is not None else base.gt
        return OpticalSettings(
            gamma=gamma_abs * np.exp(1j * self.qnd_gamma_arg),
            chi=chi_abs * np.exp(1j * self.qnd_chi_arg),
            gt=gt, phi_p=self.qnd_phi_p)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        known = {f for f in ExperimentConfig.__dataclass_fields__}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return ExperimentConfig(**data)


PRESETS: dict[str, ExperimentConfig] = {
    # paper-scale experiment configurations; trajectory counts are an
    # artifact choice sized for the acceptance checks
    "fig-n4-mixed": ExperimentConfig(
        n_particles=4, initial="completely-mixed", mode="unraveling",
        trajectories=200, seed=11, preset="fig-n4-mixed"),
    "fig-n4-coherent": ExperimentConfig(
        n_particles=4, initial="y-polarized-coherent",
        trajectories=200, seed=11, preset="fig-n4-coherent"),
    "fig-n10-mixed": ExperimentConfig(
        n_particles=10, initial="completely-mixed", mode="density",
        trajectories=20, seed=11, preset="fig-n10-mixed"),
    "fig-n11-mixed": ExperimentConfig(
        n_particles=11, initial="completely-mixed", mode="unraveling",
        m_cut=0.5, trajectories=10, seed=11, preset="fig-n11-mixed"),
}


def preset_config(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"
        ) from None


@lru_cache(maxsize=8)
def _shape(n_particles: int, two_j: int) -> EnsembleShape:
    return EnsembleShape(n_particles, two_j)


_BACKEND_CACHE: dict = {}


def _backend_for(config: ExperimentConfig):
    if config.backend == "ideal":
        return None
    key = (config.n_particles, config.two_j, config.qnd_photon_number,
           config.qnd_gamma_abs, config.qnd_chi_abs, config.qnd_gamma_arg,
           config.qnd_chi_arg, config.qnd_gt, config.qnd_phi_p,
           config.qnd_window_sd)
    if key not in _BACKEND_CACHE:
        _BACKEND_CACHE[key] = QndMeasurement(
            config.optical_settings(), _shape(config.n_particles, config.two_j),
            window_sd=config.qnd_window_sd)
    return _BACKEND_CACHE[key]


def run_trajectory(config: ExperimentConfig, index: int) -> TrajectoryResult:
    """One seeded trajectory; independent of execution order.

    In unraveling mode the first random draw picks the product basis state
    that represents the completely mixed initial condition for this run.
    """
    shape = _shape(config.n_particles, config.two_j)
    rng = RandomStream(derive_seed(config.seed, index))
    mode = config.resolved_mode()
    if mode == "unraveling":
        initial = PureState.basis_state(shape, rng.integer(shape.dim))
    else:
        initial = make_initial_state(config.initial, shape)
    return run_procedure(initial, config.protocol_config(), rng,
                         backend=_backend_for(config))


def _event_to_list(ev: MeasurementEvent) -> list:
    return [ev.round_index, ev.basis, ev.m, ev.born_probability,
            ev.applied_theta,
            list(ev.subensemble) if ev.subensemble is not None else None,
            ev.n_c, ev.n_d]


def _event_from_list(data: list) -> MeasurementEvent:
    k, basis, m, p, theta, sub, n_c, n_d = data
    return MeasurementEvent(k, basis, m, p, theta,
                            tuple(sub) if sub is not None else None, n_c, n_d)


def _record_to_dict(rec: RoundRecord) -> dict:
    return {"k": rec.k, "jbar2": rec.jbar2, "var_x": rec.var_x,
            "var_y": rec.var_y, "var_z": rec.var_z, "F": rec.fidelity,
            "F_d": list(rec.fidelity_by_singlet)}


def result_to_row(config: ExperimentConfig, index: int,
                  result: TrajectoryResult) -> dict:
    first_round = sum(1 for ev in result.events if ev.round_index == 1)
    first_sequence = sum(1 for ev in result.events
                         if ev.round_index == 1 and ev.basis == "z")
    return {
        "schema_version": SCHEMA_VERSION,
        "trajectory": index,
        "seed": result.seed,
        "config": config.to_dict(),
        "converged": result.converged,
        "converged_round": result.converged_round,
        "rounds_used": result.rounds_used,
        "draws": result.draws,
        "first_sequence_events": first_sequence,
        "first_round_events": first_round,
        "events": [_event_to_list(ev) for ev in result.events],
        "initial": _record_to_dict(result.initial),
        "rounds": [_record_to_dict(r) for r in result.rounds],
    }


def _run_row(args: tuple) -> dict:
    config, index = args
    return result_to_row(config, index, run_trajectory(config, index))


@dataclass
class RunArchive:
    config: ExperimentConfig
    rows: list[dict]
    summary: dict = field(default_factory=dict)

    def row(self, index: int) -> dict:
        for r in self.rows:
            if r["trajectory"] == index:
                return r
        raise KeyError(f"no trajectory {index} in archive")

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config.json", "w") as fh:
            json.dump({"schema_version": SCHEMA_VERSION,
                       **self.config.to_dict()}, fh, indent=2)
            fh.write("\n")
        with open(out / "rows.jsonl", "w") as fh:
            for row in self.rows:
                fh.write(json.dumps(row) + "\n")
            fh.write(json.dumps({"summary": self.summary}) + "\n")
        with open(out / "summary.json", "w") as fh:
            json.dump(self.summary, fh, indent=2)
            fh.write("\n")
        with open(out / "series.csv", "w", newline="") as fh:
            self._write_series(fh)
        return out

    def _write_series(self, fh) -> None:
        d0 = multiplet_counts(_shape(self.config.n_particles,
                                     self.config.two_j)).singlet_count
        fid_cols = [f"F_{d+1}" for d in range(d0)] if 0 < d0 <= 2 else []
        writer = csv.writer(fh)
        writer.writerow(["trajectory_id", "k", "Jbar2", "varJx", "varJy",
                         "varJz", "F", *fid_cols])
        for row in self.rows:
            for rec in [row["initial"], *row["rounds"]]:
                fids = [repr(f) for f in rec["F_d"][:len(fid_cols)]]
                writer.writerow([row["trajectory"], rec["k"], repr(rec["jbar2"]),
                                 repr(rec["var_x"]), repr(rec["var_y"]),
                                 repr(rec["var_z"]), repr(rec["F"]), *fids])

    @staticmethod
    def read(path: str | Path) -> "RunArchive":
        path = Path(path)
        rows_path = path / "rows.jsonl" if path.is_dir() else path
        config_path = rows_path.parent / "config.json"
        rows, summary = [], {}
        with open(rows_path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                data = json.loads(line)
                if "summary" in data and "trajectory" not in data:
                    summary = data["summary"]
                else:
                    rows.append(data)
        if not rows:
            raise ValueError(f"archive {rows_path} contains no trajectory rows")
        if config_path.exists():
            with open(config_path) as fh:
                stored = json.load(fh)
            version = stored.pop("schema_version", None)
            if version != SCHEMA_VERSION:
                raise ValueError(
                    f"archive schema version {version} != supported {SCHEMA_VERSION}")
            config = ExperimentConfig.from_dict(stored)
        else:
            config = ExperimentConfig.from_dict(rows[0]["config"])
        return RunArchive(config, rows, summary)


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None,
                   ) -> RunArchive:
    """Execute the configured trajectories and (optionally) write the archive."""
    errors = config.validate()
    if errors:
        raise ValueError("invalid configuration:\n  " + "\n  ".join(errors))
    shape = _shape(config.n_particles, config.two_j)
    if config.resolved_m_cut() == 0 and multiplet_counts(shape).singlet_count == 0:
        raise ValueError("invalid configuration:\n  the zero-total-spin sector "
                         "is empty for this shape; set m_cut (0.5 for odd N)")
    jobs = [(config, i) for i in range(config.trajectories)]
    workers = config.workers or os.cpu_count() or 1
    workers = min(workers, config.trajectories)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_row, jobs, chunksize=1))
    else:
        rows = [_run_row(j) for j in jobs]
    archive = RunArchive(config, rows)
    archive.summary = summarize(archive)
    if out_dir is not None:
        out = archive.write(out_dir)
        if config.backend == "qnd":
            report = effective_projector_check(
                config.optical_settings(), shape,
                window_sd=config.qnd_window_sd)
            with open(out / "qnd_report.json", "w") as fh:
                json.dump(report, fh, indent=2)
                fh.write("\n")
    return archive


def replay(archive: RunArchive, index: int) -> tuple[TrajectoryResult, dict, bool]:
    """Re-run one archived trajectory and check bit-identical agreement.

    Returns (fresh result, archived row, identical flag).  Raises on schema
    or seed corruption, and on a config mismatch between row and archive.
    """
    row = archive.row(index)
    if row.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"row schema version {row.get('schema_version')} "
                         f"!= supported {SCHEMA_VERSION}")
    row_config = ExperimentConfig.from_dict(row["config"])
    if row_config != archive.config:
        raise ValueError("row config snapshot differs from the archive config; "
                         "refusing to replay against the wrong experiment")
    expected_seed = derive_seed(row_config.seed, index)
    if row["seed"] != expected_seed:
        raise ValueError(
            f"row seed {row['seed']} does not derive from master seed "
            f"{row_config.seed} and index {index}; archive may be corrupted")
    result = run_trajectory(row_config, index)
    fresh = result_to_row(row_config, index, result)
    identical = fresh["events"] == row["events"] \
        and fresh["rounds"] == row["rounds"] and fresh["initial"] == row["initial"]
    return result, row, identical


def _quartiles(values) -> dict:
    arr = np.asarray(sorted(values), dtype=float)
    if len(arr) == 0:
        return {"median": None, "q25": None, "q75": None, "min": None, "max": None}
    return {
        "median": float(np.median(arr)),
        "q25": float(np.percentile(arr, 25)),
        "q75": float(np.percentile(arr, 75)),
        "min": float(arr[0]),
        "max": float(arr[-1]),
    }


def _cluster_label(f_d: list[float]) -> str:
    if len(f_d) != 2:
        return "n/a"
    for point in CLUSTER_POINTS:
        if max(abs(f_d[0] - point[0]), abs(f_d[1] - point[1])) < CLUSTER_TOLERANCE:
            return f"({point[0]:g},{point[1]:g})"
    return "other"


def summarize(archive: RunArchive) -> dict:
    """Aggregate statistics recomputable exactly from the rows."""
    rows = archive.rows
    if not rows:
        raise ValueError("cannot summarize an empty archive")
    converged = [r for r in rows if r["converged"]]
    finals = [r["rounds"][-1] if r["rounds"] else r["initial"] for r in rows]
    summary = {
        "n_trajectories": len(rows),
        "convergence_rate": len(converged) / len(rows),
        "rounds_to_converge": _quartiles(
            [r["converged_round"] for r in converged]),
        "rounds_used": _quartiles([r["rounds_used"] for r in rows]),
        "first_sequence_events": _quartiles(
            [r["first_sequence_events"] for r in rows]),
        "first_round_events": _quartiles([r["first_round_events"] for r in rows]),
        "final_F": _quartiles([f["F"] for f in finals]),
        "final_Jbar2": _quartiles([f["jbar2"] for f in finals]),
        "final_var_x": _quartiles([f["var_x"] for f in finals]),
        "final_var_y": _quartiles([f["var_y"] for f in finals]),
        "final_var_z": _quartiles([f["var_z"] for f in finals]),
        "draws_total": sum(r["draws"] for r in rows),
    }
    labels = [_cluster_label(f["F_d"]) for f in finals]
    if any(lab != "n/a" for lab in labels):
        counts: dict[str, int] = {}
        for lab in labels:
            counts[lab] = counts.get(lab, 0) + 1
        summary["final_fidelity_clusters"] = {
            "tolerance": CLUSTER_TOLERANCE, "counts": counts}
    return summary


def summary_text(summary: dict) -> str:
    """Human-oriented rendering of the aggregate statistics."""
    buf = io.StringIO()
    print(f"trajectories:      {summary['n_trajectories']}", file=buf)
    print(f"convergence rate:  {summary['convergence_rate']:.1%}", file=buf)
    rtc = summary["rounds_to_converge"]
    if rtc["median"] is not None:
        print(f"rounds to converge: median {rtc['median']:g} "
              f"(q25 {rtc['q25']:g}, q75 {rtc['q75']:g}, max {rtc['max']:g})",
              file=buf)
    fse = summary["first_sequence_events"]
    fre = summary["first_round_events"]
    print(f"first z-sequence:  median {fse['median']:g} events "
          f"(min {fse['min']:g}, max {fse['max']:g})", file=buf)
    print(f"first round:       median {fre['median']:g} events "
          f"(min {fre['min']:g}, max {fre['max']:g})", file=buf)
    print(f"final F:           median {summary['final_F']['median']:.9f} "
          f"(min {summary['final_F']['min']:.9f})", file=buf)
    print(f"final Jbar2:       median {summary['final_Jbar2']['median']:.3e} "
          f"(max {summary['final_Jbar2']['max']:.3e})", file=buf)
    if "final_fidelity_clusters" in summary:
        counts = summary["final_fidelity_clusters"]["counts"]
        parts = ", ".join(f"{k}: {v}" for k, v in sorted(counts.items()))
        print(f"fidelity clusters: {parts}", file=buf)
    return buf.getvalue()
