"""Mechanistic choke-flow model: densities, pressure-ratio clamp, mass flow,
oil rate at standard conditions, and analytic gradients with respect to the
physical parameters.

Units are SI throughout (Pa, K, kg, m, s); the reported oil rate is m3/h.
All functions are pure. The batch kernels accept numpy arrays plus raw
parameter values and are the single source of the model formulas; they do not
validate parameters, because optimization iterates may wander outside the
physical domain. Rows whose evaluation is undefined there (negative
square-root argument, non-finite intermediates) are flagged in a validity
mask. The typed scalar operations wrap the kernels, validate their inputs,
and turn flagged rows into ``ModelEvaluationError``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import DomainError, ModelEvaluationError

#: Canonical ordering of the physical parameter vector. The hybrid model
#: absorbs the discharge coefficient into the learned area function and
#: therefore uses only the first five entries.
PARAM_NAMES_MM = ("rho_o", "rho_w", "kappa", "m_g", "p_rc", "c_d")
PARAM_NAMES_HM = PARAM_NAMES_MM[:5]

#: Seconds per hour; oil volumetric rate is reported in m3/h.
M3PS_TO_M3PH = 3600.0


@dataclass(frozen=True)
class FluidComposition:
    """Phase mass fractions. Water is the remainder: eta_w = 1 - eta_g - eta_o."""

    eta_g: float
    eta_o: float

    def __post_init__(self):
        if not (0.0 <= self.eta_g <= 1.0):
            raise DomainError(f"eta_g must be in [0, 1], got {self.eta_g}")
        if not (0.0 <= self.eta_o <= 1.0):
            raise DomainError(f"eta_o must be in [0, 1], got {self.eta_o}")
        if self.eta_g + self.eta_o > 1.0 + 1e-12:
            raise DomainError(
                f"eta_g + eta_o must not exceed 1, got {self.eta_g + self.eta_o}"
            )

    @property
    def eta_w(self) -> float:
        """Water mass fraction (dimensionless)."""
        return max(0.0, 1.0 - self.eta_g - self.eta_o)


@dataclass(frozen=True)
class ChokeInput:
    """One operating point of the choke valve.

    p1, p2: upstream/downstream absolute pressures [Pa]
    t1:     upstream temperature [K]
    u:      choke opening, normalized to [0, 1]
    """

    p1: float
    p2: float
    t1: float
    u: float
    composition: FluidComposition

    def __post_init__(self):
        if self.p1 <= 0.0 or self.p2 <= 0.0:
            raise DomainError(f"pressures must be positive, got p1={self.p1}, p2={self.p2}")
        if self.t1 <= 0.0:
            raise DomainError(f"temperature must be positive, got t1={self.t1}")
        if not (0.0 <= self.u <= 1.0):
            raise DomainError(f"choke opening must be in [0, 1], got u={self.u}")


@dataclass(frozen=True)
class PhysicalParams:
    """The physical parameter vector of the choke model.

    rho_o: oil density [kg/m3]
    rho_w: water density [kg/m3]
    kappa: adiabatic gas expansion coefficient [-], > 1
    m_g:   molar mass of gas [kg/mol]
    p_rc:  critical pressure ratio [-], in (0, 1)
    c_d:   discharge coefficient [-]

    In hybrid-model mode (``hm_mode=True``) the discharge coefficient is not a
    parameter: it is absorbed into the learned area function and held at 1.
    """

    rho_o: float
    rho_w: float
    kappa: float
    m_g: float
    p_rc: float
    c_d: float = 1.0
    hm_mode: bool = False

    def __post_init__(self):
        for name in ("rho_o", "rho_w", "kappa", "m_g", "p_rc", "c_d"):
            if getattr(self, name) <= 0.0:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0.0 < self.p_rc < 1.0):
            raise DomainError(f"p_rc must be in (0, 1), got {self.p_rc}")
        if self.kappa <= 1.0:
            raise DomainError(f"kappa must exceed 1, got {self.kappa}")
        if self.hm_mode and self.c_d != 1.0:
            raise DomainError("c_d is not a parameter in HM mode; it must stay 1.0")

    @property
    def names(self) -> tuple:
        return PARAM_NAMES_HM if self.hm_mode else PARAM_NAMES_MM

    def to_vector(self) -> np.ndarray:
        """Parameter vector in canonical order (5 entries in HM mode, else 6)."""
        return np.array([getattr(self, n) for n in self.names], dtype=float)

    @classmethod
    def from_vector(cls, vec, hm_mode: bool = False) -> "PhysicalParams":
        names = PARAM_NAMES_HM if hm_mode else PARAM_NAMES_MM
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (len(names),):
            raise ValueError(f"expected {len(names)} entries, got shape {vec.shape}")
        kwargs = dict(zip(names, (float(v) for v in vec)))
        return cls(hm_mode=hm_mode, **kwargs)

    def with_values(self, **kwargs) -> "PhysicalParams":
        return replace(self, **kwargs)


#: Generating-truth values used by the synthetic experiments.
TRUE_PARAMS = PhysicalParams(
    rho_o=760.0, rho_w=1010.0, kappa=1.30, m_g=0.021, p_rc=0.55, c_d=1.0
)


@dataclass(frozen=True)
class FluidConstants:
    """Known constants, never estimated.

    r_gas:    universal gas constant [J/(mol K)]
    z1:       upstream gas compressibility factor [-]
    rho_o_st: oil density at standard conditions [kg/m3], used only for the
              conversion of mass flow to standard-condition volume rate.
    """

    r_gas: float = 8.31446
    z1: float = 1.0
    rho_o_st: float = 800.0

    def __post_init__(self):
        if self.z1 <= 0.0:
            raise DomainError(f"z1 must be positive, got {self.z1}")
        if self.rho_o_st <= 0.0:
            raise DomainError(f"rho_o_st must be positive, got {self.rho_o_st}")


DEFAULT_CONSTANTS = FluidConstants()

#: Parametric area curves, name -> callable(u, a_max). Each curve must be
#: non-negative and non-decreasing on [0, 1].
AREA_SHAPES = {
    "quadratic": lambda u, a_max: a_max * u * u,
    # Smooth S-curve; used as a deliberately different generating shape in the
    # structural-mismatch experiments.
    "smoothstep": lambda u, a_max: a_max * u * u * (3.0 - 2.0 * u),
}


@dataclass(frozen=True)
class AreaSpec:
    """Parametric flow-area curve A2(u) of the mechanistic model."""

    a_max: float = 1.0e-3
    shape: str = "quadratic"

    def __post_init__(self):
        if self.a_max <= 0.0:
            raise DomainError(f"a_max must be positive, got {self.a_max}")
        if self.shape not in AREA_SHAPES:
            raise DomainError(
                f"unknown area shape {self.shape!r}; known: {sorted(AREA_SHAPES)}"
            )

    def area(self, u):
        """Flow area [m2] at opening u; accepts scalars or arrays in [0, 1]."""
        u_arr = np.asarray(u, dtype=float)
        if np.any(u_arr < 0.0) or np.any(u_arr > 1.0):
            raise DomainError("choke opening must be in [0, 1]")
        out = AREA_SHAPES[self.shape](u_arr, self.a_max)
        return float(out) if u_arr.ndim == 0 else out


DEFAULT_AREA = AreaSpec()


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------

def gas_density_upstream(p1, t1, m_g, consts: FluidConstants = DEFAULT_CONSTANTS):
    """Upstream gas density [kg/m3] from the real gas law.

    rho_g1 = p1 * m_g / (z1 * R * t1). Accepts scalars or arrays.
    """
    p1a, t1a, m_ga = (np.asarray(v, dtype=float) for v in (p1, t1, m_g))
    if np.any(p1a <= 0.0) or np.any(t1a <= 0.0) or np.any(m_ga <= 0.0):
        raise DomainError("gas_density_upstream requires positive p1, t1, m_g")
    out = p1a * m_ga / (consts.z1 * consts.r_gas * t1a)
    return float(out) if out.ndim == 0 else out


def gas_density_downstream(rho_g1, p_r, kappa):
    """Downstream gas density [kg/m3] after adiabatic expansion.

    rho_g2 = rho_g1 * p_r**(1/kappa), evaluated at the effective (clamped)
    pressure ratio so critical flow is consistent across the model.
    """
    r1, pr, k = (np.asarray(v, dtype=float) for v in (rho_g1, p_r, kappa))
    if np.any(r1 <= 0.0):
        raise DomainError("rho_g1 must be positive")
    if np.any(pr <= 0.0):
        raise DomainError("pressure ratio must be positive")
    if np.any(k <= 1.0):
        raise DomainError("kappa must exceed 1")
    out = r1 * pr ** (1.0 / k)
    return float(out) if out.ndim == 0 else out


def mixture_density(comp: FluidComposition, rho_g, rho_o, rho_w):
    """Homogeneous mixture density [kg/m3].

    1/rho = eta_g/rho_g + eta_o/rho_o + eta_w/rho_w. The result always lies
    between the smallest and largest phase density.
    """
    for name, val in (("rho_g", rho_g), ("rho_o", rho_o), ("rho_w", rho_w)):
        if np.any(np.asarray(val) <= 0.0):
            raise DomainError(f"{name} must be positive")
    inv = comp.eta_g / np.asarray(rho_g, dtype=float) + comp.eta_o / rho_o + comp.eta_w / rho_w
    out = 1.0 / inv
    return float(out) if np.ndim(out) == 0 else out


def effective_pressure_ratio(p1, p2, p_rc):
    """Effective downstream/upstream pressure ratio in [p_rc, 1].

    Sub-critical flow uses p2/p1; below the critical ratio the flow chokes and
    the ratio clamps at p_rc. Rows with p2 > p1 clamp to 1 (zero flow) rather
    than erroring, since sensor noise produces such rows.
    """
    p1a, p2a = np.asarray(p1, dtype=float), np.asarray(p2, dtype=float)
    if np.any(p1a <= 0.0) or np.any(p2a <= 0.0):
        raise DomainError("pressures must be positive")
    out = np.minimum(1.0, np.maximum(p2a / p1a, p_rc))
    return float(out) if out.ndim == 0 else out


def mechanistic_area(u, spec: AreaSpec = DEFAULT_AREA):
    """Flow area [m2] of the mechanistic parametric curve at opening u."""
    return spec.area(u)


# ---------------------------------------------------------------------------
# Batch kernels
# ---------------------------------------------------------------------------

def batch_oil_rate(p1, p2, t1, eta_g, eta_o, area, phi_vec, hm_mode=False,
                   consts: FluidConstants = DEFAULT_CONSTANTS):
    """Oil rate [m3/h] for arrays of operating points at raw parameter values.

    ``phi_vec`` is the canonical parameter vector (6 entries, or 5 with
    ``hm_mode=True``). Returns ``(q_o, ok)`` where ``ok`` marks rows with a
    well-defined, finite evaluation; failed rows carry q_o = nan.
    """
    q_o, _, _, ok = _oil_rate_kernel(p1, p2, t1, eta_g, eta_o, area, phi_vec,
                                     hm_mode, consts, need_grad=False)
    return q_o, ok


def batch_oil_rate_gradients(p1, p2, t1, eta_g, eta_o, area, phi_vec,
                             hm_mode=False,
                             consts: FluidConstants = DEFAULT_CONSTANTS):
    """Oil rate plus analytic gradients for arrays of operating points.

    Returns ``(q_o, dq_dphi, dq_darea, ok)``:

    - ``dq_dphi``: (n, k) array, k = 6 in MM mode / 5 in HM mode, columns in
      canonical parameter order; the p_rc column is zero wherever the
      critical-flow clamp is inactive,
    - ``dq_darea``: (n,) derivative of q_o with respect to the flow area,
      finite even at area = 0 (q_o is linear in the area).

    Failed rows have nan value and zero gradient entries.
    """
    return _oil_rate_kernel(p1, p2, t1, eta_g, eta_o, area, phi_vec, hm_mode,
                            consts, need_grad=True)


def _oil_rate_kernel(p1, p2, t1, eta_g, eta_o, area, phi_vec, hm_mode, consts,
                     need_grad):
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    t1 = np.asarray(t1, dtype=float)
    eta_g = np.asarray(eta_g, dtype=float)
    eta_o = np.asarray(eta_o, dtype=float)
    area = np.asarray(area, dtype=float)
    eta_w = 1.0 - eta_g - eta_o

    phi_vec = np.asarray(phi_vec, dtype=float)
    n_phi = 5 if hm_mode else 6
    if phi_vec.shape != (n_phi,):
        raise ValueError(f"expected {n_phi} parameters, got shape {phi_vec.shape}")
    rho_o, rho_w, kappa, m_g, p_rc = phi_vec[:5]
    c_d = 1.0 if hm_mode else phi_vec[5]

    with np.errstate(all="ignore"):
        r_raw = p2 / p1
        p_r = np.minimum(1.0, np.maximum(r_raw, p_rc))
        # Sub-critical branch wins the tie at r_raw == p_rc, so the clamp is
        # "active" (d p_r / d p_rc = 1) only for strictly smaller raw ratios.
        clamp_active = (r_raw < p_rc) & (p_rc < 1.0)

        rho_g1 = p1 * m_g / (consts.z1 * consts.r_gas * t1)
        w = p_r ** (1.0 / kappa)
        rho_g2 = rho_g1 * w

        inv_rho2 = eta_g / rho_g2 + eta_o / rho_o + eta_w / rho_w
        rho2 = 1.0 / inv_rho2

        kk = kappa / (kappa - 1.0)
        gas = 1.0 / rho_g1 - p_r / rho_g2
        liq = eta_o / rho_o + eta_w / rho_w
        energy = kk * eta_g * gas + liq * (1.0 - p_r)

        arg = 2.0 * rho2 * rho2 * p1 * energy
        ok = np.isfinite(arg) & (arg >= 0.0)

        s = np.sqrt(np.where(ok, arg, 0.0))  # mass flux per unit c_d*area, kg/(s m2)
        base = M3PS_TO_M3PH * eta_o / consts.rho_o_st
        q_o = np.where(ok, base * c_d * s * area, np.nan)

        if not need_grad:
            return q_o, None, None, ok

        out_shape = np.broadcast(p1, p2, t1, eta_g, eta_o, area).shape
        dq_dphi = np.zeros(out_shape + (n_phi,), dtype=float)

        # d q_o / d theta = base*c_d*area * darg/dtheta / (2 sqrt(arg));
        # zero-flow rows (arg == 0) have zero one-sided parameter sensitivity.
        positive = ok & (s > 0.0)
        half_inv_s = np.where(positive, 0.5 / np.where(positive, s, 1.0), 0.0)
        pref = base * c_d * area * half_inv_s

        rho2_sq = rho2 * rho2

        def darg(drho2_dt, denergy_dt):
            return 2.0 * p1 * (2.0 * rho2 * drho2_dt * energy + rho2_sq * denergy_dt)

        # rho_o
        d_rho2 = rho2_sq * eta_o / (rho_o * rho_o)
        d_energy = -(1.0 - p_r) * eta_o / (rho_o * rho_o)
        dq_dphi[..., 0] = pref * darg(d_rho2, d_energy)

        # rho_w
        d_rho2 = rho2_sq * eta_w / (rho_w * rho_w)
        d_energy = -(1.0 - p_r) * eta_w / (rho_w * rho_w)
        dq_dphi[..., 1] = pref * darg(d_rho2, d_energy)

        # kappa: through kappa/(kappa-1) and through the expansion exponent
        log_pr = np.log(p_r)
        drho_g2 = -rho_g2 * log_pr / (kappa * kappa)
        d_rho2 = rho2_sq * eta_g / (rho_g2 * rho_g2) * drho_g2
        d_gas = p_r / (rho_g2 * rho_g2) * drho_g2
        d_energy = (-1.0 / ((kappa - 1.0) ** 2)) * eta_g * gas + kk * eta_g * d_gas
        dq_dphi[..., 2] = pref * darg(d_rho2, d_energy)

        # m_g: rho_g1 and rho_g2 both scale linearly with the molar mass
        d_rho2 = rho2_sq * eta_g / (rho_g2 * m_g)
        d_energy = -kk * eta_g * gas / m_g
        dq_dphi[..., 3] = pref * darg(d_rho2, d_energy)

        # p_rc, via the clamp (chain through p_r where active)
        drho_g2 = rho_g1 * (1.0 / kappa) * p_r ** (1.0 / kappa - 1.0)
        d_rho2 = rho2_sq * eta_g / (rho_g2 * rho_g2) * drho_g2
        d_gas = -1.0 / rho_g2 + p_r / (rho_g2 * rho_g2) * drho_g2
        d_energy = kk * eta_g * d_gas - liq
        dq_dphi[..., 4] = np.where(clamp_active, pref * darg(d_rho2, d_energy), 0.0)

        if not hm_mode:
            dq_dphi[..., 5] = base * s * area  # q_o is linear in c_d

        dq_darea = np.where(ok, base * c_d * s, 0.0)
        dq_dphi[~ok] = 0.0

    return q_o, dq_dphi, dq_darea, ok


# ---------------------------------------------------------------------------
# Scalar operations on typed inputs
# ---------------------------------------------------------------------------

def _check_ok(ok, x, phi, area=None) -> None:
    if not bool(ok):
        inputs = {"x": x, "phi": phi}
        if area is not None:
            inputs["area"] = area
        raise ModelEvaluationError(
            "negative or non-finite square-root argument in the flow equation",
            inputs=inputs,
        )


def mass_flow_rate(x: ChokeInput, phi: PhysicalParams, consts: FluidConstants,
                   area: float) -> float:
    """Mass flow rate [kg/s] through the choke at the given flow area."""
    if area < 0.0:
        raise DomainError(f"area must be non-negative, got {area}")
    comp = x.composition
    p_r = effective_pressure_ratio(x.p1, x.p2, phi.p_rc)
    rho_g1 = gas_density_upstream(x.p1, x.t1, phi.m_g, consts)
    rho_g2 = gas_density_downstream(rho_g1, p_r, phi.kappa)
    rho2 = mixture_density(comp, rho_g2, phi.rho_o, phi.rho_w)
    kk = phi.kappa / (phi.kappa - 1.0)
    energy = kk * comp.eta_g * (1.0 / rho_g1 - p_r / rho_g2) \
        + (comp.eta_o / phi.rho_o + comp.eta_w / phi.rho_w) * (1.0 - p_r)
    arg = 2.0 * rho2 * rho2 * x.p1 * energy
    if not math.isfinite(arg) or arg < 0.0:
        raise ModelEvaluationError(
            "negative or non-finite square-root argument in the flow equation",
            inputs={"x": x, "phi": phi, "area": area},
        )
    c_d = 1.0 if phi.hm_mode else phi.c_d
    return c_d * area * math.sqrt(arg)


def oil_rate_std(mdot: float, eta_o: float, rho_o_st: float) -> float:
    """Oil volumetric rate [m3/h] at standard conditions from mass flow [kg/s]."""
    if rho_o_st <= 0.0:
        raise DomainError(f"rho_o_st must be positive, got {rho_o_st}")
    if mdot < 0.0:
        raise DomainError(f"mass flow must be non-negative, got {mdot}")
    return eta_o * mdot / rho_o_st * M3PS_TO_M3PH


def mm_predict(x: ChokeInput, phi: PhysicalParams,
               consts: FluidConstants = DEFAULT_CONSTANTS,
               spec: AreaSpec = DEFAULT_AREA) -> float:
    """Predicted oil rate [m3/h] of the mechanistic model at one input."""
    q_o, ok = batch_oil_rate(x.p1, x.p2, x.t1, x.composition.eta_g,
                             x.composition.eta_o, spec.area(x.u),
                             phi.to_vector(), phi.hm_mode, consts)
    _check_ok(ok, x, phi)
    return float(q_o)


def mm_param_gradient(x: ChokeInput, phi: PhysicalParams,
                      consts: FluidConstants = DEFAULT_CONSTANTS,
                      spec: AreaSpec = DEFAULT_AREA) -> np.ndarray:
    """Gradient of the predicted oil rate with respect to the physical
    parameters, in canonical order (6 entries in MM mode, 5 in HM mode).

    The p_rc component is zero while the critical-flow clamp is inactive.
    """
    _, dq_dphi, _, ok = batch_oil_rate_gradients(
        x.p1, x.p2, x.t1, x.composition.eta_g, x.composition.eta_o,
        spec.area(x.u), phi.to_vector(), phi.hm_mode, consts)
    _check_ok(ok, x, phi)
    return np.asarray(dq_dphi, dtype=float).reshape(-1)


def hm_predict(x: ChokeInput, phi: PhysicalParams, area: float,
               consts: FluidConstants = DEFAULT_CONSTANTS) -> float:
    """Predicted oil rate [m3/h] of the hybrid model at an externally supplied
    flow area (the learned area function evaluated at x.u)."""
    if area < 0.0:
        raise DomainError(f"area must be non-negative, got {area}")
    vec = phi.to_vector() if phi.hm_mode else phi.to_vector()[:5]
    q_o, ok = batch_oil_rate(x.p1, x.p2, x.t1, x.composition.eta_g,
                             x.composition.eta_o, area, vec, True, consts)
    _check_ok(ok, x, phi, area)
    return float(q_o)
