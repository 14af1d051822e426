"""Configuration-table-driven trade studies over the simulated V2I pipeline.

A study is a list of cases evaluated on a shared set of trial seeds; every
(case, trial) unit is independent, so the study result does not depend on
worker count or execution order.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .geometry import ReferenceFrame, world_frame
from .metrics import (
    BoxSet,
    FrameEval,
    MetricsReport,
    clear_mot,
    hota,
    match_frame,
    mean_average_precision,
    perception_counts,
    track_rates,
)
from .prediction import kinematic_predict
from .scene import Detection, OcclusionScore, score_from_fraction
from .sim import (
    NOISE_LEVELS,
    CommModel,
    ScenarioConfig,
    SensorModel,
    generate_scenario,
    place_infrastructure,
    sense,
    sensors_in_range,
    visible_objects,
)
from .tracking import Tracker, TrackerConfig, preprocess_remote

__all__ = [
    "ConfigError",
    "TrialError",
    "CaseConfig",
    "InfraConfig",
    "EgoConfig",
    "EvalConfig",
    "TradeStudyConfig",
    "TrialResult",
    "StudyReport",
    "trial_seed",
    "run_case",
    "run_study",
    "aggregate",
    "dumps",
]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class TrialError(RuntimeError):
    def __init__(self, case: str, trial: int, frame: int | None, cause: BaseException):
        where = f"case {case!r}, trial {trial}" + ("" if frame is None else f", frame {frame}")
        super().__init__(f"{where}: {type(cause).__name__}: {cause}")
        self.case, self.trial, self.frame = case, trial, frame


def _build(cls, d: Mapping, path: str):
    if not isinstance(d, Mapping):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(d) - known)
    if extra:
        raise ConfigError(f"{path}.{extra[0]}: unknown field")
    try:
        return cls(**d)
    except ConfigError as e:
        raise ConfigError(f"{path}.{e}") from None
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from None


def _check(cond: bool, name: str, msg: str):
    if not cond:
        raise ConfigError(f"{name}: {msg}")


@dataclass(frozen=True)
class CaseConfig:
    """One row of a trade-study table."""

    id: str
    collaboration: bool = True
    noise: str = "None"
    rate: float = 10.0
    comm_range: float = 100.0
    tracker: Mapping[str, Any] = field(default_factory=dict)
    horizon: float = 3.0
    step: float = 0.5

    def __post_init__(self):
        _check(isinstance(self.id, str) and bool(self.id), "id", "must be a non-empty string")
        _check(self.noise in NOISE_LEVELS, "noise", f"must be one of {sorted(NOISE_LEVELS)}")
        _check(self.rate > 0, "rate", "must be positive")
        _check(self.comm_range >= 0, "comm_range", "must be >= 0")
        _check(self.horizon > 0, "horizon", "must be positive")
        _check(self.step > 0, "step", "must be positive")
        try:
            TrackerConfig(**self.tracker)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"tracker: {e}") from None

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(**self.tracker)


@dataclass(frozen=True)
class InfraConfig:
    """Roadside sensor placement; angles in degrees, ``fov`` is the full azimuth."""

    count: int = 40
    height: float = 15.0
    pitch: float = 30.0
    fov: float = 180.0
    fov_elevation: float = 30.0
    max_range: float = 70.0
    p_miss: float = 0.0
    false_alarm_rate: float = 0.0
    line_count: int | None = 64

    def __post_init__(self):
        _check(self.count >= 0, "count", "must be >= 0")
        _check(self.max_range > 0, "max_range", "must be positive")
        _check(0.0 <= self.p_miss <= 1.0, "p_miss", "must lie in [0, 1]")
        _check(self.false_alarm_rate >= 0, "false_alarm_rate", "must be >= 0")


@dataclass(frozen=True)
class EgoConfig:
    """The ego's own sensor, identical for every case of a study."""

    max_range: float = 25.0
    fov: float = 360.0
    fov_elevation: float = 30.0
    mount_height: float = 1.8
    noise: str = "Low"
    rate: float = 10.0
    p_miss: float = 0.0
    false_alarm_rate: float = 0.0

    def __post_init__(self):
        _check(self.max_range > 0, "max_range", "must be positive")
        _check(self.noise in NOISE_LEVELS, "noise", f"must be one of {sorted(NOISE_LEVELS)}")
        _check(0.0 <= self.p_miss <= 1.0, "p_miss", "must lie in [0, 1]")


@dataclass(frozen=True)
class EvalConfig:
    radius: float = 100.0
    iou_threshold: float = 0.3
    max_occlusion: str = "PARTIAL"

    def __post_init__(self):
        _check(self.radius > 0, "radius", "must be positive")
        _check(0.0 < self.iou_threshold <= 1.0, "iou_threshold", "must lie in (0, 1]")
        _check(self.max_occlusion in ("NONE", "PARTIAL", "MOST", "COMPLETE"), "max_occlusion",
               "must be NONE, PARTIAL, MOST or COMPLETE")

    @property
    def occlusion(self) -> OcclusionScore:
        return OcclusionScore[self.max_occlusion]


@dataclass(frozen=True)
class TradeStudyConfig:
    name: str
    cases: tuple[CaseConfig, ...]
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    infrastructure: InfraConfig = field(default_factory=InfraConfig)
    ego: EgoConfig = field(default_factory=EgoConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    trials: int = 10
    master_seed: int = 0

    def __post_init__(self):
        _check(isinstance(self.name, str) and bool(self.name), "name", "must be a non-empty string")
        _check(self.trials >= 1, "trials", "must be >= 1")
        _check(len(self.cases) >= 1, "cases", "must list at least one case")
        seen = set()
        for i, c in enumerate(self.cases):
            _check(c.id not in seen, f"cases[{i}].id", f"duplicate case id {c.id!r}")
            seen.add(c.id)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TradeStudyConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("study: expected an object")
        d = dict(d)
        extra = sorted(set(d) - {f.name for f in fields(cls)})
        if extra:
            raise ConfigError(f"{extra[0]}: unknown field")
        if "name" not in d:
            raise ConfigError("name: required")
        raw_cases = d.get("cases")
        if not isinstance(raw_cases, list):
            raise ConfigError("cases: expected a list")
        d["cases"] = tuple(_build(CaseConfig, c, f"cases[{i}]") for i, c in enumerate(raw_cases))
        if "scenario" in d:
            sc = d["scenario"]
            if not isinstance(sc, Mapping):
                raise ConfigError("scenario: expected an object")
            extra = sorted(set(sc) - {f.name for f in fields(ScenarioConfig)})
            if extra:
                raise ConfigError(f"scenario.{extra[0]}: unknown field")
            try:
                d["scenario"] = ScenarioConfig.from_dict(sc)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"scenario: {e}") from None
        for key, sub in (("infrastructure", InfraConfig), ("ego", EgoConfig), ("evaluation", EvalConfig)):
            if key in d:
                d[key] = _build(sub, d[key], key)
        for key in ("trials", "master_seed"):
            if key in d and not isinstance(d[key], int):
                raise ConfigError(f"{key}: must be an integer")
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TradeStudyConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as e:
            raise ConfigError(f"{path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(raw)

    def case(self, case_id: str) -> CaseConfig:
        for c in self.cases:
            if c.id == case_id:
                return c
        raise ConfigError(f"case: no case {case_id!r} in study {self.name!r}")

    def seeds(self) -> list[int]:
        return [trial_seed(self.master_seed, t) for t in range(self.trials)]


def trial_seed(master: int, trial: int) -> int:
    """Seed shared by every case for one trial; a hash of (master, trial)."""
    state = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, int(trial)]).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


# --- one (case, trial) ---------------------------------------------------------


@dataclass
class TrialResult:
    case: str
    trial: int
    seed: int
    metrics: MetricsReport


def _ego_sensor(ego: EgoConfig, frame: ReferenceFrame, frame_rate: float) -> SensorModel:
    mount = ReferenceFrame(translation=(0.0, 0.0, ego.mount_height), parent=frame, id=f"{frame.id}/lidar")
    s = SensorModel(id=0, frame=mount, fov_azimuth=math.radians(ego.fov) / 2.0,
                    fov_elevation=math.radians(ego.fov_elevation), max_range=ego.max_range, rate=ego.rate,
                    p_miss=ego.p_miss, false_alarm_rate=ego.false_alarm_rate)
    return s.with_noise(ego.noise)


def _infrastructure(study: TradeStudyConfig, case: CaseConfig, seed: int, world: ReferenceFrame) -> list[SensorModel]:
    inf = study.infrastructure
    sensors = place_infrastructure(
        inf.count, study.scenario.extent, inf.height, math.radians(inf.pitch), math.radians(inf.fov), seed, world,
        fov_elevation=math.radians(inf.fov_elevation), max_range=inf.max_range, rate=case.rate,
        p_miss=inf.p_miss, false_alarm_rate=inf.false_alarm_rate, line_count=inf.line_count,
    )
    return [s.with_noise(case.noise) for s in sensors]


def _detection_rows(dets: Sequence[Detection]) -> np.ndarray:
    out = np.zeros((len(dets), 7))
    for i, d in enumerate(dets):
        b = d.box
        out[i, :3] = b.center
        out[i, 3:6] = b.dimensions
        out[i, 6] = b.yaw
    return out


class _Log:
    """JSON-lines writers for one trial directory; a no-op without a directory."""

    def __init__(self, directory: Path | None):
        self.dir = directory
        self.files: dict[str, Any] = {}
        if directory is not None:
            directory.mkdir(parents=True, exist_ok=True)

    def write(self, stream: str, record: Mapping):
        if self.dir is None:
            return
        fh = self.files.get(stream)
        if fh is None:
            fh = self.files[stream] = open(self.dir / f"{stream}.jsonl", "w")
        fh.write(json.dumps(record, sort_keys=True, allow_nan=False) + "\n")

    def close(self):
        for fh in self.files.values():
            fh.close()


def run_case(study: TradeStudyConfig, case: CaseConfig, trial: int, log_dir: str | os.PathLike | None = None) -> TrialResult:
    """Run one case on one trial seed and score it.

    With ``log_dir`` set, ground truth, detections, tracks and predictions
    are written as JSON lines together with ``metrics.json``.
    """
    seed = trial_seed(study.master_seed, trial)
    frame_idx: int | None = None
    log = _Log(None if log_dir is None else Path(log_dir))
    try:
        world = world_frame()
        scenario = generate_scenario(replace(study.scenario, seed=seed), world)
        fr = study.scenario.frame_rate
        infra = _infrastructure(study, case, seed, world) if case.collaboration else []
        comm = CommModel(range=case.comm_range)
        infra_step = infra[0].frame_step(fr) if infra else 1
        ego_cfg = study.ego
        ego_step = _ego_sensor(ego_cfg, world, fr).frame_step(fr)
        ev = study.evaluation
        tracker = Tracker(case.tracker_config())

        det_frames: list[FrameEval] = []
        track_frames: list[FrameEval] = []
        det_sets: list[BoxSet] = []
        truth_sets: list[BoxSet] = []
        pred_jobs = []
        in_range_counts: list[int] = []
        remote_counts: list[int] = []
        n = scenario.num_frames
        for k in range(n):
            frame_idx = k
            t = scenario.timestamp(k)
            ego = scenario.ego_frame(k)
            boxes = scenario.box_array(k)
            ego_sensor = _ego_sensor(ego_cfg, ego, fr)

            dets: list[Detection] = []
            if k % ego_step == 0:
                dets.extend(d.in_frame(ego) for d in sense(ego_sensor, boxes, seed, k, t, world, scenario.types))
            remote: list[Detection] = []
            if case.collaboration:
                ids = sensors_in_range(scenario.ego_positions[k], infra, comm)
                in_range_counts.append(len(ids))
                if k % infra_step == 0:
                    chosen = set(ids)
                    for s in infra:
                        if s.id in chosen:
                            remote.extend(sense(s, boxes, seed, k, t, world, scenario.types))
                    remote = preprocess_remote(remote, ego, ev.radius)
                remote_counts.append(len(remote))
            dets.extend(remote)
            for d in dets:
                log.write("detections", {"frame": k, **d.to_dict()})

            tracks = tracker.step(dets, t, ego)

            # Ground truth in the ego snapshot, with occlusion seen from the ego sensor.
            to_ego = ego.local_transform().inverse()
            gt = boxes.copy()
            gt[:, :3] = to_ego.apply(boxes[:, :3])
            gt[:, 6] = boxes[:, 6] - scenario.ego_yaws[k]
            gt[:, 6] = (gt[:, 6] + math.pi) % (2 * math.pi) - math.pi
            occ = np.full(len(gt), OcclusionScore.COMPLETE.value)
            near = np.nonzero(np.linalg.norm(gt[:, :3], axis=1) <= ev.radius)[0]
            if len(near):
                origin = scenario.ego_positions[k] + np.array([0.0, 0.0, ego_cfg.mount_height])
                frac = visible_objects(origin, boxes, near, occluder_radius=ev.radius + 10.0)
                occ[near] = [score_from_fraction(f).value for f in frac]
            truths = BoxSet(scenario.ids, gt, occ, types=[o.value for o in scenario.types])
            for i in range(len(gt)):
                log.write("truth", {"frame": k, "id": int(scenario.ids[i]), "box": gt[i].tolist(),
                                    "occlusion": int(occ[i]), "timestamp": t})

            det_set = BoxSet(np.arange(len(dets)), _detection_rows(dets),
                             scores=[d.confidence for d in dets], types=[d.object_type.value for d in dets])
            det_frames.append(match_frame(truths, det_set, ev.iou_threshold, ev.radius, ev.occlusion))
            scoped = det_frames[-1]
            keep_t = np.isin(truths.ids, scoped.truth_ids)
            truth_sets.append(truths.subset(keep_t))
            keep_d = np.linalg.norm(det_set.boxes[:, :3], axis=1) <= ev.radius
            det_sets.append(det_set.subset(keep_d))

            trk_set = BoxSet([tr.id for tr in tracks], np.array([tr.box_row for tr in tracks]).reshape(-1, 7))
            fe = match_frame(truths, trk_set, ev.iou_threshold, ev.radius, ev.occlusion)
            track_frames.append(fe)
            for tr in tracks:
                log.write("tracks", tr.to_dict(k))

            by_track = {p: g for g, p in fe.matches}
            for tr in tracks:
                traj = kinematic_predict(tr, case.horizon, case.step)
                log.write("predictions", traj.to_dict(k))
                if tr.id in by_track:
                    pred_jobs.append((k, by_track[tr.id], traj))
        frame_idx = None

        metrics = _score(scenario, det_frames, det_sets, truth_sets, track_frames, pred_jobs,
                         in_range_counts, remote_counts, case.collaboration)
    except ConfigError:
        raise
    except Exception as e:
        raise TrialError(case.id, trial, frame_idx, e) from e
    finally:
        log.close()
    result = TrialResult(case.id, trial, seed, metrics)
    if log_dir is not None:
        Path(log_dir, "metrics.json").write_text(dumps({"case": case.id, "trial": trial, "seed": seed,
                                                        "metrics": metrics.to_dict()}))
    return result


def _score(scenario, det_frames, det_sets, truth_sets, track_frames, pred_jobs,
           in_range_counts, remote_counts, collaboration) -> MetricsReport:
    pc = perception_counts(det_frames)
    mota, motp = clear_mot(track_frames)
    ftr, mtr = track_rates(track_frames)

    ades, fdes = [], []
    world_to_ego: dict[int, Any] = {}
    index = {int(i): j for j, i in enumerate(scenario.ids)}
    n = scenario.num_frames
    fr = scenario.cfg.frame_rate
    for k, gid, traj in pred_jobs:
        tf = world_to_ego.get(k)
        if tf is None:
            tf = world_to_ego[k] = scenario.ego_frame(k).local_transform().inverse()
        future = np.rint(traj.timestamps * fr).astype(int)
        ok = future < n
        if not ok.any():
            continue
        # realised positions share the waypoint timestamps exactly, so the
        # errors are the row distances over the available prefix
        actual = tf.apply(scenario.positions[future[ok], index[gid]])
        err = np.sqrt(((traj.positions[ok] - actual) ** 2).sum(axis=1))
        ade, fde = float(err.mean()), float(err[-1])
        ades.append(ade)
        fdes.append(fde)

    nan = float("nan")
    return MetricsReport(
        precision=pc["precision"],
        recall=pc["recall"],
        fpr=pc["fpr"],
        fnr=pc["fnr"],
        map=mean_average_precision(det_sets, truth_sets),
        hota=hota(track_frames),
        mota=mota,
        motp=motp,
        ftr=ftr,
        mtr=mtr,
        ade=float(np.mean(ades)) if ades else nan,
        fde=float(np.mean(fdes)) if fdes else nan,
        sensors_in_range=float(np.mean(in_range_counts)) if collaboration and in_range_counts else nan,
        dets_per_frame=float(np.mean(remote_counts)) if collaboration and remote_counts else nan,
    )


# --- studies -----------------------------------------------------------------


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample std over the defined values; (NaN, NaN) when none are."""
    v = np.array([x for x in values if not math.isnan(x)], dtype=float)
    if len(v) == 0:
        return float("nan"), float("nan")
    if np.all(v == v[0]):
        # exact, where a summed mean could drift by an ulp
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1))


@dataclass
class StudyReport:
    """Per-trial metrics for each case plus their mean and sample std."""

    name: str
    cases: list[str]
    trials: list[TrialResult]

    def case_trials(self, case: str) -> list[MetricsReport]:
        return [t.metrics for t in sorted(self.trials, key=lambda r: r.trial) if t.case == case]

    def summary(self) -> dict[str, dict[str, tuple[float, float]]]:
        out = {}
        for c in self.cases:
            reports = self.case_trials(c)
            out[c] = {m: aggregate([getattr(r, m) for r in reports]) for m in MetricsReport.names()}
        return out

    def to_dict(self) -> dict:
        def clean(x):
            return None if math.isnan(x) else x

        summary = self.summary()
        return {
            "study": self.name,
            "metrics": MetricsReport.names(),
            "cases": [
                {
                    "id": c,
                    "summary": {m: {"mean": clean(mu), "std": clean(sd)} for m, (mu, sd) in summary[c].items()},
                    "trials": [
                        {"trial": t.trial, "seed": t.seed, "metrics": t.metrics.to_dict()}
                        for t in sorted(self.trials, key=lambda r: r.trial) if t.case == c
                    ],
                }
                for c in self.cases
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StudyReport":
        trials = []
        for c in d["cases"]:
            for t in c["trials"]:
                trials.append(TrialResult(c["id"], int(t["trial"]), int(t["seed"]), MetricsReport.from_dict(t["metrics"])))
        return cls(d["study"], [c["id"] for c in d["cases"]], trials)


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, fixed indent, shortest round-trip floats."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _unit(args):
    study, case_id, trial, out = args
    log_dir = None if out is None else Path(out, study.name, case_id, str(trial))
    return run_case(study, study.case(case_id), trial, log_dir)


def run_study(study: TradeStudyConfig, jobs: int = 1, out: str | os.PathLike | None = None,
              cases: Sequence[str] | None = None) -> StudyReport:
    """Run every (case, trial) unit, optionally across ``jobs`` processes.

    ``cases`` restricts the run to a subset of case ids; the remaining
    cases are unaffected because each unit depends only on its own
    configuration and trial seed.
    """
    ids = [c.id for c in study.cases] if cases is None else list(cases)
    for cid in ids:
        study.case(cid)
    units = [(study, cid, t, out) for cid in ids for t in range(study.trials)]
    if jobs <= 1 or len(units) == 1:
        results = [_unit(u) for u in units]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_unit, units))
    report = StudyReport(study.name, ids, results)
    if out is not None:
        path = Path(out, study.name)
        path.mkdir(parents=True, exist_ok=True)
        (path / "report.json").write_text(dumps(report.to_dict()))
    return report
