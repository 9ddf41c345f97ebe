"""Scenario definition and the end-to-end session driver."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .backend import BackendConfig, BackendState, finalize, new_state, process_frame
from .evaluation import (
    TrajectoryPair,
    compute_ate,
    compute_map_rmse,
    drift_series,
    sample_wall,
)
from .simulator import (
    NoiseSpec,
    SensorSpec,
    WorldParams,
    WorldSpec,
    generate_trajectory,
    generate_world,
    simulate_frame,
)

MODES = ("bim", "baseline")


@dataclass
class TrajectorySpec:
    kind: str = "loop"
    n_frames: int = 200

    def __post_init__(self):
        if self.kind not in ("loop", "sweep"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")


@dataclass
class Scenario:
    name: str = "default"
    layout: str = "multi_room"
    world: WorldParams = field(default_factory=WorldParams)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    backend: BackendConfig = field(default_factory=BackendConfig)
    mode: str = "bim"
    seed: int = 0
    repeats: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    def with_(self, **kw) -> "Scenario":
        return replace(self, **kw)


@dataclass
class SessionResult:
    scenario: Scenario
    world: WorldSpec
    state: BackendState
    estimated: list
    ground_truth: list
    drift: list
    ate_raw: float
    ate_aligned: float
    map_rmse: float
    final_cost: float
    wallclock_s: float
    log: list = field(default_factory=list)

    def metrics_row(self) -> dict:
        return {
            "scenario": self.scenario.name,
            "mode": self.scenario.mode,
            "seed": self.scenario.seed,
            "missing_fraction": self.scenario.world.phantom_fraction,
            "ate_raw": self.ate_raw,
            "ate_aligned": self.ate_aligned,
            "map_rmse": self.map_rmse,
            "final_cost": self.final_cost,
            "wallclock_s": self.wallclock_s,
        }


def build_world(scenario: Scenario) -> WorldSpec:
    return generate_world(scenario.layout, scenario.world, scenario.seed)


def map_samples(state: BackendState) -> np.ndarray:
    walls = state.track_walls()
    if not walls:
        return np.zeros((0, 3))
    return np.concatenate([sample_wall(w) for w in walls])


def run_session(scenario: Scenario, world: Optional[WorldSpec] = None) -> SessionResult:
    """Simulate and process a whole sequence; deterministic given the scenario."""
    t0 = time.perf_counter()
    world = world or build_world(scenario)
    gt = generate_trajectory(world, scenario.trajectory.kind, scenario.trajectory.n_frames, scenario.seed)
    cfg = scenario.backend
    bim = []
    if scenario.mode == "bim":
        bim = world.bim_walls
        if not (cfg.init.bim_id_first and cfg.init.bim_id_second):
            a, b = world.anchor_ids
            cfg = replace(cfg, init=replace(cfg.init, bim_id_first=a, bim_id_second=b))
    state = new_state(bim, cfg)
    prev = None
    for k, T in enumerate(gt):
        obs = simulate_frame(T, prev, world, scenario.sensor, scenario.noise, scenario.seed, k)
        process_frame(state, obs)
        prev = T
    result = finalize(state)
    final_cost = result.final_cost if result is not None else state.graph.total_cost(cfg.opt.huber_delta)
    est = list(state.graph.poses)
    pair = TrajectoryPair.from_lists(est, gt)
    online = TrajectoryPair.from_lists(state.online_estimates, gt)
    samples = map_samples(state)
    bim_map = world.bim_walls_map()
    map_rmse = compute_map_rmse(samples, bim_map) if len(samples) else float("nan")
    return SessionResult(
        scenario=scenario,
        world=world,
        state=state,
        estimated=est,
        ground_truth=gt,
        drift=drift_series(online),
        ate_raw=compute_ate(pair, align=False),
        ate_aligned=compute_ate(pair, align=True),
        map_rmse=map_rmse,
        final_cost=float(final_cost),
        wallclock_s=time.perf_counter() - t0,
        log=list(state.log),
    )
