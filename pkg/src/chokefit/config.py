"""Run configuration: a strict JSON schema covering data generation, priors,
regularization, optimizer settings, CSV schema, splitting, sweeps, and search.

Unknown keys are rejected anywhere in the document. Every field has a
documented default; the fully resolved configuration is echoed into each run
directory so runs are reconstructible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import nnet, physics
from .data import InputRanges, SchemaConfig, SyntheticConfig
from .estimation import FitConfig, PriorSpec, RegularizationConfig, SearchSpace
from .exceptions import ConfigError
from .physics import AreaSpec, FluidConstants, PhysicalParams


def _check_keys(section: dict, allowed, where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config keys in {where}: {sorted(unknown)}")


def _pair(value, where: str) -> tuple:
    if not (isinstance(value, (list, tuple)) and len(value) == 2):
        raise ConfigError(f"{where} must be a [low, high] pair")
    return float(value[0]), float(value[1])


@dataclass(frozen=True)
class SplitConfig:
    test_fraction: float | None = 0.2
    cutoff: str | None = None


@dataclass(frozen=True)
class SweepConfig:
    sigma_eps: tuple = (5.0, 0.5, 0.005)


@dataclass(frozen=True)
class SearchConfig:
    space: SearchSpace = field(default_factory=SearchSpace)
    budget: int = 20
    trial_restarts: int = 3


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings of one CLI run."""

    seed: int = 0
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    n_test: int = 500
    mismatch_shape: str = "smoothstep"
    priors: PriorSpec = field(default_factory=PriorSpec.default)
    regularization: RegularizationConfig = field(default_factory=RegularizationConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    constants: FluidConstants = field(default_factory=FluidConstants)
    schema: SchemaConfig = field(default_factory=SchemaConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    search: SearchConfig = field(default_factory=SearchConfig)

    def resolved_dict(self) -> dict:
        """The full configuration with every default filled in, for echoing."""
        syn = self.synthetic
        return {
            "seed": self.seed,
            "synthetic": {
                "n_points": syn.n_points,
                "n_test": self.n_test,
                "noise_sigma": syn.noise_sigma,
                "mismatch_shape": self.mismatch_shape,
                "true_params": dict(zip(physics.PARAM_NAMES_MM,
                                        syn.true_params.to_vector().tolist())),
                "area": {"a_max": syn.area.a_max, "shape": syn.area.shape},
                "input_ranges": {
                    "p1_bar": list(syn.input_ranges.p1_bar),
                    "pressure_ratio": list(syn.input_ranges.pressure_ratio),
                    "t1": list(syn.input_ranges.t1),
                    "u": list(syn.input_ranges.u),
                    "eta_g": list(syn.input_ranges.eta_g),
                    "eta_o": list(syn.input_ranges.eta_o),
                },
            },
            "priors": self.priors.as_dict(),
            "regularization": {
                "sigma_eps": self.regularization.sigma_eps,
                "lambda": self.regularization.lam,
                "enabled": self.regularization.enabled,
            },
            "fit": {
                "optimizer": self.fit.optimizer,
                "learning_rate": self.fit.learning_rate,
                "batch_size": self.fit.batch_size,
                "epochs": self.fit.epochs,
                "restarts": self.fit.restarts,
                "mode": self.fit.mode,
                "fixed_params": dict(self.fit.fixed_params),
                "mlp_sizes": list(self.fit.mlp_sizes),
                "mlp_area_scale": self.fit.mlp_area_scale,
            },
            "constants": {
                "r_gas": self.constants.r_gas,
                "z1": self.constants.z1,
                "rho_o_st": self.constants.rho_o_st,
            },
            "schema": {
                "columns": dict(self.schema.columns),
                "pressure_factor": self.schema.pressure_factor,
                "u_factor": self.schema.u_factor,
                "q_o_factor": self.schema.q_o_factor,
            },
            "split": {"test_fraction": self.split.test_fraction,
                      "cutoff": self.split.cutoff},
            "sweep": {"sigma_eps": list(self.sweep.sigma_eps)},
            "search": {
                "lr_range": list(self.search.space.lr_range),
                "lambda_range": list(self.search.space.lam_range),
                "budget": self.search.budget,
                "trial_restarts": self.search.trial_restarts,
            },
        }


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Parse a JSON config file (all sections optional) and apply CLI
    overrides: seed, mode, no_reg, fixed_params."""
    doc = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return _build(doc, overrides or {}, where=str(path) if path else "<defaults>")


def _build(doc: dict, overrides: dict, where: str) -> RunConfig:
    _check_keys(doc, ("seed", "synthetic", "priors", "regularization", "fit",
                      "constants", "schema", "split", "sweep", "search"), where)
    seed = int(doc.get("seed", 0))
    if "seed" in overrides and overrides["seed"] is not None:
        seed = int(overrides["seed"])

    constants = _build_constants(doc.get("constants", {}))
    synthetic, n_test, mismatch_shape = _build_synthetic(
        doc.get("synthetic", {}), seed, constants)
    priors = PriorSpec.from_dict(doc.get("priors", {}))
    reg = _build_regularization(doc.get("regularization", {}), overrides)
    fit = _build_fit(doc.get("fit", {}), seed, overrides)
    schema = _build_schema(doc.get("schema", {}))
    split = _build_split(doc.get("split", {}))
    sweep = _build_sweep(doc.get("sweep", {}))
    search = _build_search(doc.get("search", {}))
    return RunConfig(seed=seed, synthetic=synthetic, n_test=n_test,
                     mismatch_shape=mismatch_shape, priors=priors,
                     regularization=reg, fit=fit, constants=constants,
                     schema=schema, split=split, sweep=sweep, search=search)


def _build_constants(section: dict) -> FluidConstants:
    _check_keys(section, ("r_gas", "z1", "rho_o_st"), "constants")
    base = FluidConstants()
    return FluidConstants(
        r_gas=float(section.get("r_gas", base.r_gas)),
        z1=float(section.get("z1", base.z1)),
        rho_o_st=float(section.get("rho_o_st", base.rho_o_st)),
    )


def _build_synthetic(section: dict, seed: int, constants: FluidConstants):
    _check_keys(section, ("n_points", "n_test", "noise_sigma", "mismatch_shape",
                          "true_params", "area", "input_ranges", "seed"),
                "synthetic")
    true_params = physics.TRUE_PARAMS
    if "true_params" in section:
        _check_keys(section["true_params"], physics.PARAM_NAMES_MM,
                    "synthetic.true_params")
        vec = true_params.to_vector()
        for i, name in enumerate(physics.PARAM_NAMES_MM):
            if name in section["true_params"]:
                vec[i] = float(section["true_params"][name])
        true_params = PhysicalParams.from_vector(vec)
    area = physics.DEFAULT_AREA
    if "area" in section:
        _check_keys(section["area"], ("a_max", "shape"), "synthetic.area")
        area = AreaSpec(
            a_max=float(section["area"].get("a_max", physics.DEFAULT_AREA.a_max)),
            shape=section["area"].get("shape", physics.DEFAULT_AREA.shape),
        )
    ranges = InputRanges()
    if "input_ranges" in section:
        fields = ("p1_bar", "pressure_ratio", "t1", "u", "eta_g", "eta_o")
        _check_keys(section["input_ranges"], fields, "synthetic.input_ranges")
        kwargs = {name: _pair(value, f"synthetic.input_ranges.{name}")
                  for name, value in section["input_ranges"].items()}
        ranges = InputRanges(**kwargs)
    cfg = SyntheticConfig(
        true_params=true_params,
        area=area,
        n_points=int(section.get("n_points", 2000)),
        input_ranges=ranges,
        noise_sigma=float(section.get("noise_sigma", 0.0)),
        seed=int(section.get("seed", seed)),
        constants=constants,
    )
    n_test = int(section.get("n_test", 500))
    mismatch_shape = section.get("mismatch_shape", "smoothstep")
    if mismatch_shape not in physics.AREA_SHAPES:
        raise ConfigError(f"unknown synthetic.mismatch_shape {mismatch_shape!r}")
    return cfg, n_test, mismatch_shape


def _build_regularization(section: dict, overrides: dict) -> RegularizationConfig:
    _check_keys(section, ("sigma_eps", "lambda", "enabled"), "regularization")
    enabled = bool(section.get("enabled", True))
    if overrides.get("no_reg"):
        enabled = False
    return RegularizationConfig(
        sigma_eps=float(section.get("sigma_eps", 1.0)),
        lam=float(section.get("lambda", 1.0e-4)),
        enabled=enabled,
    )


def _build_fit(section: dict, seed: int, overrides: dict) -> FitConfig:
    _check_keys(section, ("optimizer", "learning_rate", "batch_size", "epochs",
                          "restarts", "mode", "fixed_params", "mlp_sizes",
                          "mlp_area_scale"), "fit")
    mode = section.get("mode", "mm")
    if overrides.get("mode"):
        mode = overrides["mode"]
    fixed = dict(section.get("fixed_params", {}))
    fixed.update(overrides.get("fixed_params", {}))
    return FitConfig(
        optimizer=section.get("optimizer", "adam"),
        learning_rate=float(section.get("learning_rate", 1.0e-3)),
        batch_size=int(section.get("batch_size", 32)),
        epochs=int(section.get("epochs", 2000)),
        restarts=int(section.get("restarts", 10)),
        seed=seed,
        fixed_params={k: float(v) for k, v in fixed.items()},
        mode=mode,
        mlp_sizes=tuple(int(s) for s in section.get("mlp_sizes", nnet.DEFAULT_SIZES)),
        mlp_area_scale=float(section.get("mlp_area_scale", nnet.DEFAULT_AREA_SCALE)),
    )


def _build_schema(section: dict) -> SchemaConfig:
    _check_keys(section, ("columns", "pressure_factor", "u_factor", "q_o_factor"),
                "schema")
    return SchemaConfig(
        columns=dict(section.get("columns", {})),
        pressure_factor=float(section.get("pressure_factor", 1.0)),
        u_factor=float(section.get("u_factor", 1.0)),
        q_o_factor=float(section.get("q_o_factor", 1.0)),
    )


def _build_split(section: dict) -> SplitConfig:
    _check_keys(section, ("test_fraction", "cutoff"), "split")
    fraction = section.get("test_fraction", None if "cutoff" in section else 0.2)
    return SplitConfig(
        test_fraction=None if fraction is None else float(fraction),
        cutoff=section.get("cutoff"),
    )


def _build_sweep(section: dict) -> SweepConfig:
    _check_keys(section, ("sigma_eps",), "sweep")
    values = section.get("sigma_eps", (5.0, 0.5, 0.005))
    if not values:
        raise ConfigError("sweep.sigma_eps must list at least one value")
    return SweepConfig(sigma_eps=tuple(float(v) for v in values))


def _build_search(section: dict) -> SearchConfig:
    _check_keys(section, ("lr_range", "lambda_range", "budget", "trial_restarts"),
                "search")
    space = SearchSpace(
        lr_range=_pair(section.get("lr_range", (1e-4, 1e-1)), "search.lr_range"),
        lam_range=_pair(section.get("lambda_range", (1e-8, 1e-2)),
                        "search.lambda_range"),
    )
    return SearchConfig(
        space=space,
        budget=int(section.get("budget", 20)),
        trial_restarts=int(section.get("trial_restarts", 3)),
    )
