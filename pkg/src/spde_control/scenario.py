"""Scenario configuration: strict structured-text runs for the batch CLI.

A scenario file is JSON with explicit units everywhere (interval length,
absolute times, control bounds).  Validation is strict: unknown keys are
rejected at every level, so silent drift between configuration and code is
impossible.  One master seed drives every stage through a documented
derivation (stage index -> path -> step), which makes all reported
statistics bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .function_space import Grid, spectral_basis
from .model import MODEL_LIBRARY, ControlBox, NemytskiiModel, NoiseModel

# stage indices of the seed derivation, recorded in run manifests
STAGES = {
    "simulate": 0,
    "value": 1,
    "adjoint": 2,
    "branch": 3,
    "optimize": 4,
    "probe": 5,
    "verify": 6,
    "replicate": 7,
}


class ScenarioError(ValueError):
    """Raised for malformed scenario files, with the offending key."""


def _require_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ScenarioError(f"unknown keys {sorted(unknown)} in {where}; "
                            f"allowed: {sorted(allowed)}")


@dataclass(frozen=True)
class Scenario:
    name: str
    grid_length: float
    grid_n: int
    t_start: float
    t_end: float
    n_steps: int
    model_name: str
    model_params: dict
    initial_modes: tuple
    noise_channels: int
    seed: int
    control_box: tuple            # ((lo, hi), ...) per control dimension
    control_grid_points: int
    paths: dict
    probe_count: int
    probe_first: float
    probe_last: float
    tau_fractions: tuple
    z_norms: tuple
    random_directions: int
    mode_directions: int
    eta: float
    eta_schedule: tuple
    kernel_substeps: int
    regression: dict
    optimizer: dict
    tolerances: dict

    # ------------------------------------------------------------------
    # parsing
    # ------------------------------------------------------------------

    _TOP = {"name", "grid", "horizon", "model", "initial", "noise", "control",
            "paths", "probes", "second_adjoint", "regression", "optimizer",
            "tolerances"}

    @classmethod
    def from_dict(cls, raw: dict) -> "Scenario":
        _require_keys(raw, cls._TOP, "scenario")
        try:
            grid = raw["grid"]
            _require_keys(grid, {"length", "n"}, "grid")
            horizon = raw["horizon"]
            _require_keys(horizon, {"start", "end", "steps"}, "horizon")
            model = raw["model"]
            _require_keys(model, {"name", "params"}, "model")
            initial = raw.get("initial", {"modes": [0.4]})
            _require_keys(initial, {"modes"}, "initial")
            noise = raw["noise"]
            _require_keys(noise, {"channels", "seed"}, "noise")
            control = raw.get("control", {})
            _require_keys(control, {"box", "grid_points"}, "control")
            paths = raw.get("paths", {})
            _require_keys(paths, {"simulate", "value", "adjoint", "kernel",
                                  "branch", "replications"}, "paths")
            probes = raw.get("probes", {})
            _require_keys(probes, {"count", "first_fraction", "last_fraction",
                                   "tau_fractions", "z_norms",
                                   "random_directions", "mode_directions"},
                          "probes")
            second = raw.get("second_adjoint", {})
            _require_keys(second, {"eta", "eta_schedule", "substeps"},
                          "second_adjoint")
            regression = raw.get("regression", {})
            _require_keys(regression, {"n_modes", "degree", "cond_threshold"},
                          "regression")
            optimizer = raw.get("optimizer", {})
            _require_keys(optimizer, {"paths", "max_iterations", "damping",
                                      "gap_tolerance"}, "optimizer")
            tolerances = raw.get("tolerances", {})
            _require_keys(tolerances, {"probe_quotient", "certificate",
                                       "necessary"}, "tolerances")
        except KeyError as err:
            raise ScenarioError(f"missing required section {err}") from err

        if model["name"] not in MODEL_LIBRARY:
            raise ScenarioError(f"unknown model {model['name']!r}; "
                                f"library: {sorted(MODEL_LIBRARY)}")
        steps = int(horizon["steps"])
        if steps < 1:
            raise ScenarioError("horizon.steps must be at least 1 "
                                "(empty horizon rejected)")
        if not horizon["end"] > horizon["start"]:
            raise ScenarioError("horizon.end must exceed horizon.start")
        box = tuple(tuple(float(v) for v in pair)
                    for pair in control.get("box", [[-4.0, 4.0]]))
        for lo, hi in box:
            if not lo < hi:
                raise ScenarioError(f"control box interval [{lo}, {hi}] empty")

        return cls(
            name=str(raw.get("name", "scenario")),
            grid_length=float(grid["length"]),
            grid_n=int(grid["n"]),
            t_start=float(horizon["start"]),
            t_end=float(horizon["end"]),
            n_steps=steps,
            model_name=str(model["name"]),
            model_params=dict(model.get("params", {})),
            initial_modes=tuple(float(c) for c in initial.get("modes", [0.4])),
            noise_channels=int(noise["channels"]),
            seed=int(noise["seed"]),
            control_box=box,
            control_grid_points=int(control.get("grid_points", 33)),
            paths={"simulate": 512, "value": 10000, "adjoint": 512,
                   "kernel": 96, "branch": 400, "replications": 6,
                   **{k: int(v) for k, v in paths.items()}},
            probe_count=int(probes.get("count", 8)),
            probe_first=float(probes.get("first_fraction", 0.15)),
            probe_last=float(probes.get("last_fraction", 0.8)),
            tau_fractions=tuple(probes.get("tau_fractions",
                                           (0.08, 0.04, 0.02, 0.01))),
            z_norms=tuple(probes.get("z_norms", (0.2, 0.1, 0.05, 0.025))),
            random_directions=int(probes.get("random_directions", 4)),
            mode_directions=int(probes.get("mode_directions", 4)),
            eta=float(second.get("eta", 2.5e-3)),
            eta_schedule=tuple(second.get("eta_schedule",
                                          (1e-2, 5e-3, 2.5e-3))),
            kernel_substeps=int(second.get("substeps", 8)),
            regression={"n_modes": 4, "degree": 2, "cond_threshold": 1e8,
                        **regression},
            optimizer={"paths": 512, "max_iterations": 12, "damping": 1.0,
                       "gap_tolerance": 2e-5, **optimizer},
            tolerances={"probe_quotient": 0.02, "certificate": 1e-3,
                        "necessary": 1e-3, **tolerances},
        )

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "grid": {"length": self.grid_length, "n": self.grid_n},
            "horizon": {"start": self.t_start, "end": self.t_end,
                        "steps": self.n_steps},
            "model": {"name": self.model_name, "params": self.model_params},
            "initial": {"modes": list(self.initial_modes)},
            "noise": {"channels": self.noise_channels, "seed": self.seed},
            "control": {"box": [list(pair) for pair in self.control_box],
                        "grid_points": self.control_grid_points},
            "paths": dict(self.paths),
            "probes": {"count": self.probe_count,
                       "first_fraction": self.probe_first,
                       "last_fraction": self.probe_last,
                       "tau_fractions": list(self.tau_fractions),
                       "z_norms": list(self.z_norms),
                       "random_directions": self.random_directions,
                       "mode_directions": self.mode_directions},
            "second_adjoint": {"eta": self.eta,
                               "eta_schedule": list(self.eta_schedule),
                               "substeps": self.kernel_substeps},
            "regression": dict(self.regression),
            "optimizer": dict(self.optimizer),
            "tolerances": dict(self.tolerances),
        }

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()

    # ------------------------------------------------------------------
    # component builders
    # ------------------------------------------------------------------

    def build_grid(self) -> Grid:
        return Grid(self.grid_length, self.grid_n)

    def build_times(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.n_steps + 1)

    def build_box(self) -> ControlBox:
        lows = [pair[0] for pair in self.control_box]
        highs = [pair[1] for pair in self.control_box]
        return ControlBox(lows, highs)

    def build_model(self) -> NemytskiiModel:
        factory = MODEL_LIBRARY[self.model_name]
        return factory(control_box=self.build_box(), **self.model_params)

    def build_noise(self, stage: str) -> NoiseModel:
        return NoiseModel(seed=self.seed, m=self.noise_channels,
                          stage=STAGES[stage])

    def build_initial(self) -> np.ndarray:
        grid = self.build_grid()
        basis = spectral_basis(grid)
        x0 = np.zeros(grid.n)
        for k, coeff in enumerate(self.initial_modes):
            shape = np.sin((k + 1) * np.pi * grid.nodes / grid.length)
            x0 += coeff * shape
        return x0

    def probe_indices(self) -> list[int]:
        fracs = np.linspace(self.probe_first, self.probe_last, self.probe_count)
        return sorted({int(round(f * self.n_steps)) for f in fracs})

    def apply_overrides(self, overrides: dict) -> "Scenario":
        """Dotted-path overrides, e.g. {'noise.seed': 7, 'paths.value': 100}."""
        raw = self.to_dict()
        for dotted, value in overrides.items():
            node = raw
            parts = dotted.split(".")
            for part in parts[:-1]:
                if part not in node:
                    raise ScenarioError(f"override path {dotted!r} not found")
                node = node[part]
            leaf = parts[-1]
            if leaf not in node:
                raise ScenarioError(f"override path {dotted!r} not found")
            old = node[leaf]
            if isinstance(old, bool):
                node[leaf] = value in ("1", "true", "True", True)
            elif isinstance(old, int):
                node[leaf] = int(value)
            elif isinstance(old, float):
                node[leaf] = float(value)
            elif isinstance(old, list):
                node[leaf] = json.loads(value) if isinstance(value, str) else value
            else:
                node[leaf] = value
        return Scenario.from_dict(raw)


def builtin_scenarios() -> dict[str, dict]:
    """Shipped scenario definitions used by the acceptance suite and docs."""
    lq_additive = {
        "name": "lq_additive",
        "grid": {"length": 1.0, "n": 32},
        "horizon": {"start": 0.0, "end": 0.5, "steps": 200},
        "model": {"name": "lq",
                  "params": {"a": 0.5, "beta": [1.0], "sigma_additive": [0.2],
                             "cost_x": 1.0, "cost_u": 0.1,
                             "cost_terminal": 1.0}},
        "initial": {"modes": [0.4, 0.1]},
        "noise": {"channels": 1, "seed": 20260809},
        "control": {"box": [[-4.0, 4.0]], "grid_points": 33},
        "paths": {"simulate": 512, "value": 10000, "adjoint": 512,
                  "kernel": 64, "branch": 400, "replications": 6},
    }
    lq_bench = {
        "name": "lq_adjoint_bench",
        "grid": {"length": 1.0, "n": 32},
        "horizon": {"start": 0.0, "end": 0.5, "steps": 200},
        "model": {"name": "lq",
                  "params": {"a": 0.5, "beta": [0.5], "sigma_additive": [0.05],
                             "cost_x": 1.0, "cost_u": 0.5,
                             "cost_terminal": 1.0}},
        "initial": {"modes": [0.8, 0.3]},
        "noise": {"channels": 1, "seed": 20260809},
        "control": {"box": [[-4.0, 4.0]], "grid_points": 33},
        "paths": {"simulate": 400, "value": 4000, "adjoint": 400,
                  "kernel": 16, "branch": 400, "replications": 6},
        "second_adjoint": {"eta": 2.5e-3, "eta_schedule": [1e-2, 5e-3, 2.5e-3],
                           "substeps": 16},
    }
    lq_multiplicative = {
        "name": "lq_multiplicative",
        "grid": {"length": 1.0, "n": 32},
        "horizon": {"start": 0.0, "end": 0.5, "steps": 200},
        "model": {"name": "lq",
                  "params": {"a": 0.5, "beta": [1.0], "sigma_additive": [0.0],
                             "sigma_state": [0.25], "cost_x": 1.0,
                             "cost_u": 0.1, "cost_terminal": 1.0}},
        "initial": {"modes": [0.8]},
        "noise": {"channels": 1, "seed": 20260809},
        "control": {"box": [[-4.0, 4.0]], "grid_points": 33},
        "paths": {"simulate": 400, "value": 4000, "adjoint": 400,
                  "kernel": 64, "branch": 400, "replications": 6},
    }
    cubic_trig = {
        "name": "cubic_trig",
        "grid": {"length": 1.0, "n": 32},
        "horizon": {"start": 0.0, "end": 0.5, "steps": 200},
        "model": {"name": "cubic_trig",
                  "params": {"beta": [1.5], "sigma_amp": [0.2],
                             "sigma_offset": [0.1], "cost_x": 1.0,
                             "cost_u": 0.05, "cost_terminal": 1.0}},
        "initial": {"modes": [0.4]},
        "noise": {"channels": 1, "seed": 20260809},
        "control": {"box": [[-3.0, 3.0]], "grid_points": 33},
        "paths": {"simulate": 384, "value": 4000, "adjoint": 384,
                  "kernel": 96, "branch": 400, "replications": 6},
        "probes": {"count": 6, "first_fraction": 0.2, "last_fraction": 0.8},
        "regression": {"n_modes": 6},
        "second_adjoint": {"substeps": 4},
    }
    return {s["name"]: s for s in
            (lq_additive, lq_bench, lq_multiplicative, cubic_trig)}


def write_builtin_scenarios(directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, raw in builtin_scenarios().items():
        path = directory / f"{name}.json"
        path.write_text(json.dumps(raw, indent=2) + "\n")
        written.append(path)
    return written
