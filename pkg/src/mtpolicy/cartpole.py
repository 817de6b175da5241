"""Ground-truth cart-pole simulator for data collection and policy testing.

State x = (chi, chi_dot, phi, phi_dot) with phi = 0 hanging down and
phi = pi upright, so targets sit at [eta, *, pi + 2k*pi, *].  The pole is
a uniform rod (center of mass at half length, inertia m l^2 / 3 about the
pivot); the cart sees viscous ground friction.  Integration is RK4 over
the control interval with additive Gaussian noise per control step.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

GRAVITY = 9.82  # matches the dynamics convention of the benchmark lineage


@dataclass(frozen=True)
class CartPoleParams:
    cart_mass: float = 0.5  # kg
    pole_mass: float = 0.5  # kg
    pole_length: float = 0.6  # m
    friction: float = 0.1  # N s / m
    dt_control: float = 0.1  # s
    u_max: float = 10.0  # N (not stated in the benchmark description)
    # per-dimension noise SD added once per control step (not plant-specified)
    process_noise_sd: tuple[float, float, float, float] = (0.01, 0.01, 0.01, 0.01)
    rk_substeps: int = 10

    def __post_init__(self):
        for name in ("cart_mass", "pole_mass", "pole_length", "dt_control", "u_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.friction < 0 or any(s < 0 for s in self.process_noise_sd):
            raise ValueError("friction and noise SDs must be nonnegative")


@dataclass(frozen=True)
class CartPoleState:
    chi: float
    chi_dot: float
    phi: float
    phi_dot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.chi, self.chi_dot, self.phi, self.phi_dot])

    @classmethod
    def from_array(cls, x) -> "CartPoleState":
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]))


def _accels(p: CartPoleParams, chi_dot: float, phi: float, phi_dot: float, u: float):
    """Solve the 2x2 mass-matrix system for (chi_ddot, phi_ddot)."""
    m, mc, l = p.pole_mass, p.cart_mass, p.pole_length
    a = 0.5 * l  # distance pivot -> center of mass
    j = m * l * l / 3.0  # rod inertia about the pivot
    sin_p, cos_p = math.sin(phi), math.cos(phi)
    r1 = u - p.friction * chi_dot + m * a * phi_dot * phi_dot * sin_p
    r2 = -m * GRAVITY * a * sin_p
    det = (mc + m) * j - (m * a * cos_p) ** 2
    chi_dd = (j * r1 - m * a * cos_p * r2) / det
    phi_dd = ((mc + m) * r2 - m * a * cos_p * r1) / det
    return chi_dd, phi_dd


def _rk4(p: CartPoleParams, x: tuple, u: float, h: float) -> tuple:
    def f(s):
        chi, chi_dot, phi, phi_dot = s
        chi_dd, phi_dd = _accels(p, chi_dot, phi, phi_dot, u)
        return (chi_dot, chi_dd, phi_dot, phi_dd)

    k1 = f(x)
    k2 = f(tuple(x[i] + 0.5 * h * k1[i] for i in range(4)))
    k3 = f(tuple(x[i] + 0.5 * h * k2[i] for i in range(4)))
    k4 = f(tuple(x[i] + h * k3[i] for i in range(4)))
    return tuple(x[i] + h / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]) for i in range(4))


def step(
    p: CartPoleParams,
    state: CartPoleState,
    u: float,
    rng: np.random.Generator | None = None,
) -> CartPoleState:
    """Integrate one control interval; force is clamped to [-u_max, u_max].

    Noise is a single zero-mean Gaussian increment per control step with
    the configured per-dimension SDs; pass rng=None for the noise-free
    plant.  Deterministic given the rng state.
    """
    if abs(u) > p.u_max:
        logger.warning("control %.3f exceeds u_max %.3f; clamped", u, p.u_max)
        u = math.copysign(p.u_max, u)
    h = p.dt_control / p.rk_substeps
    x = (state.chi, state.chi_dot, state.phi, state.phi_dot)
    for _ in range(p.rk_substeps):
        x = _rk4(p, x, float(u), h)
    x = np.array(x)
    if rng is not None:
        sd = np.array(p.process_noise_sd)
        if np.any(sd > 0):
            x = x + sd * rng.standard_normal(4)
    return CartPoleState.from_array(x)


def sample_initial(rng: np.random.Generator, sd: float = 0.1) -> CartPoleState:
    """Draw from the hanging-down initial distribution N(0, sd^2 I)."""
    return CartPoleState.from_array(sd * rng.standard_normal(4))


def energy(p: CartPoleParams, state: CartPoleState) -> float:
    """Total mechanical energy (zero at the hanging rest configuration)."""
    m, mc, l = p.pole_mass, p.cart_mass, p.pole_length
    a = 0.5 * l
    j = m * l * l / 3.0
    ke = (
        0.5 * (mc + m) * state.chi_dot**2
        + m * a * state.chi_dot * state.phi_dot * math.cos(state.phi)
        + 0.5 * j * state.phi_dot**2
    )
    pe = m * GRAVITY * a * (1.0 - math.cos(state.phi))
    return ke + pe


@dataclass
class Trajectory:
    """Recorded plant rollout; rows (t, chi, chi_dot, phi, phi_dot, u)."""

    states: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    dt: float = 0.1

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,chi,chi_dot,phi,phi_dot,u\n")
        for i, s in enumerate(self.states):
            u = self.controls[i] if i < len(self.controls) else ""
            u_str = repr(float(u)) if u != "" else ""
            buf.write(
                f"{repr(i * self.dt)},{s.chi!r},{s.chi_dot!r},{s.phi!r},{s.phi_dot!r},{u_str}\n"
            )
        return buf.getvalue()


def simulate(
    p: CartPoleParams,
    x0: CartPoleState,
    controller,
    n_steps: int,
    rng: np.random.Generator | None = None,
) -> Trajectory:
    """Roll the plant for n_steps under controller(state_array) -> force."""
    traj = Trajectory(dt=p.dt_control)
    s = x0
    traj.states.append(s)
    for _ in range(n_steps):
        u = float(controller(s.as_array()))
        traj.controls.append(u)
        s = step(p, s, u, rng)
        traj.states.append(s)
    return traj
