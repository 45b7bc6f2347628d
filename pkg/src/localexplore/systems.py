"""
Ground-truth benchmark systems.

Each system is an Euler-discretized model ``x+ = f(x, u) + g(x, u) + w`` with a
known prior part ``f``, an unknown part ``g`` the GP has to learn, diagonal
Gaussian process noise ``w`` and a box of admissible inputs. Angles use the
convention theta = 0 for the upright pendulum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .info import Region

__all__ = [
    "SystemSpec",
    "make_toy",
    "make_surface",
    "make_pendulum",
    "make_cartpole",
    "SYSTEMS",
    "get_system",
]

DEFAULT_NOISE_STD = 0.01


@dataclass(frozen=True)
class SystemSpec:
    """Discrete-time system with a known prior and an unknown residual.

    ``known_f`` and ``true_g`` accept broadcastable arrays ``x`` (..., d_x) and
    ``u`` (..., d_u) and return (..., d_x).
    """

    name: str
    d_x: int
    d_u: int
    dt: float
    known_f: Callable
    true_g: Callable
    noise_std: np.ndarray
    input_lower: np.ndarray
    input_upper: np.ndarray
    region_lower: np.ndarray
    region_upper: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("noise_std", "input_lower", "input_upper", "region_lower", "region_upper"):
            a = np.array(getattr(self, name), dtype=float).reshape(-1)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.noise_std.size != self.d_x or np.any(self.noise_std < 0):
            raise ValueError("need one nonnegative noise std per state dimension")
        if self.input_lower.size != self.d_u or self.input_upper.size != self.d_u:
            raise ValueError("input bounds must have d_u entries")
        if self.region_lower.size != self.d_x + self.d_u \
                or self.region_upper.size != self.d_x + self.d_u:
            raise ValueError("region box must have d_x + d_u entries")

    @property
    def dim(self) -> int:
        return self.d_x + self.d_u

    @property
    def region(self) -> Region:
        return self.make_region()

    def make_region(self, per_dim=5, cap=625, rng=None) -> Region:
        return Region.grid(self.region_lower, self.region_upper, per_dim, cap, rng)

    @property
    def state_center(self) -> np.ndarray:
        return 0.5 * (self.region_lower + self.region_upper)[: self.d_x]

    @property
    def state_halfwidth(self) -> np.ndarray:
        return 0.5 * (self.region_upper - self.region_lower)[: self.d_x]

    def inputs_valid(self, u) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.input_lower) and np.all(u <= self.input_upper))

    def target(self, x, u):
        """Learning target without noise, ``g(x, u)``."""
        return self.true_g(np.asarray(x, dtype=float), np.asarray(u, dtype=float))

    def step(self, x, u, rng=None) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(self.d_x)
        u = np.asarray(u, dtype=float).reshape(self.d_u)
        if not np.all(np.isfinite(u)) or not self.inputs_valid(u):
            raise ValueError(f"input {u} outside [{self.input_lower}, {self.input_upper}]")
        nxt = self.known_f(x, u) + self.true_g(x, u)
        if rng is not None:
            nxt = nxt + self.noise_std * rng.standard_normal(self.d_x)
        return nxt


def _identity_prior(x, u):
    return np.array(x, dtype=float, copy=True)


def _noise(noise_std, d_x):
    if noise_std is None:
        noise_std = DEFAULT_NOISE_STD
    return np.broadcast_to(np.asarray(noise_std, dtype=float), (d_x,)).copy()


def make_toy(dt=0.1, noise_std=None, input_bound=5.0) -> SystemSpec:
    """Scalar system ``xdot = 10 (sin x + arctan x + u)`` with prior ``f = x``."""

    def g(x, u):
        return dt * 10.0 * (np.sin(x) + np.arctan(x) + u)

    return SystemSpec(
        name="toy", d_x=1, d_u=1, dt=dt,
        known_f=_identity_prior, true_g=g,
        noise_std=_noise(noise_std, 1),
        input_lower=[-input_bound], input_upper=[input_bound],
        region_lower=[-np.pi, -1.0], region_upper=[np.pi, 1.0],
        params={"dt": dt, "input_bound": input_bound},
    )


def make_surface(dt=0.02, noise_std=None, input_bound=5.0, gain=3.0) -> SystemSpec:
    """Agent on a periodic surface; the prior ``x + gain dt u`` leaves only the slope."""

    def f(x, u):
        return x + gain * dt * u

    def g(x, u):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        return dt * 10.0 * np.stack(
            [np.cos(5 * x1) * np.cos(5 * x2), np.sin(5 * x1) * np.sin(5 * x2)], axis=-1)

    quarter = np.pi / 4
    return SystemSpec(
        name="surface", d_x=2, d_u=2, dt=dt,
        known_f=f, true_g=g,
        noise_std=_noise(noise_std, 2),
        input_lower=[-input_bound] * 2, input_upper=[input_bound] * 2,
        region_lower=[-quarter, -quarter, -1.0, -1.0],
        region_upper=[quarter, quarter, 1.0, 1.0],
        params={"dt": dt, "input_bound": input_bound, "gain": gain},
    )


def pendulum_acceleration(theta, omega, u, mass=1.0, length=1.0, gravity=9.81, damping=0.1):
    inertia = mass * length ** 2
    return (gravity / length) * np.sin(theta) - (damping / inertia) * omega + u / inertia


def make_pendulum(dt=0.05, noise_std=None, mass=1.0, length=1.0, gravity=9.81,
                  damping=0.1, input_bound=10.0) -> SystemSpec:
    """Damped pendulum with state (theta, theta_dot) and torque input."""

    def g(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        th, om = x[..., 0], x[..., 1]
        acc = pendulum_acceleration(th, om, u[..., 0], mass, length, gravity, damping)
        return dt * np.stack([om, acc], axis=-1)

    return SystemSpec(
        name="pendulum", d_x=2, d_u=1, dt=dt,
        known_f=_identity_prior, true_g=g,
        noise_std=_noise(noise_std, 2),
        input_lower=[-input_bound], input_upper=[input_bound],
        region_lower=[np.pi / 2, -5.0, -3.0], region_upper=[3 * np.pi / 2, 5.0, 3.0],
        params={"dt": dt, "mass": mass, "length": length, "gravity": gravity,
                "damping": damping, "input_bound": input_bound},
    )


def cartpole_accelerations(theta, omega, force, torque=0.0, cart_mass=1.0, pole_mass=0.1,
                           half_length=0.5, gravity=9.81):
    """Cart and pole accelerations of the classic cart-pole with a pivot torque."""
    total = cart_mass + pole_mass
    sin, cos = np.sin(theta), np.cos(theta)
    temp = (force + pole_mass * half_length * omega ** 2 * sin) / total
    theta_acc = (gravity * sin - cos * temp + torque / (pole_mass * half_length)) / (
        half_length * (4.0 / 3.0 - pole_mass * cos ** 2 / total))
    cart_acc = temp - pole_mass * half_length * theta_acc * cos / total
    return cart_acc, theta_acc


def make_cartpole(dt=0.05, noise_std=None, n_inputs=2, cart_mass=1.0, pole_mass=0.1,
                  half_length=0.5, gravity=9.81, input_bound=10.0,
                  omega_bound=2.0) -> SystemSpec:
    """Cart-pole without cart position: state (v, theta, theta_dot).

    ``n_inputs=2`` adds a pivot torque to the cart force; ``n_inputs=1`` is
    the force-only variant.
    """
    if n_inputs not in (1, 2):
        raise ValueError("cart-pole supports 1 or 2 inputs")

    def g(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        th, om = x[..., 1], x[..., 2]
        torque = u[..., 1] if n_inputs == 2 else 0.0
        cart_acc, theta_acc = cartpole_accelerations(
            th, om, u[..., 0], torque, cart_mass, pole_mass, half_length, gravity)
        return dt * np.stack([cart_acc, om, theta_acc], axis=-1)

    quarter = np.pi / 4
    return SystemSpec(
        name="cartpole", d_x=3, d_u=n_inputs, dt=dt,
        known_f=_identity_prior, true_g=g,
        noise_std=_noise(noise_std, 3),
        input_lower=[-input_bound] * n_inputs, input_upper=[input_bound] * n_inputs,
        region_lower=[-2.0, -quarter, -omega_bound] + [-5.0] * n_inputs,
        region_upper=[2.0, quarter, omega_bound] + [5.0] * n_inputs,
        params={"dt": dt, "n_inputs": n_inputs, "cart_mass": cart_mass,
                "pole_mass": pole_mass, "half_length": half_length, "gravity": gravity,
                "input_bound": input_bound, "omega_bound": omega_bound},
    )


SYSTEMS = {
    "toy": make_toy,
    "surface": make_surface,
    "pendulum": make_pendulum,
    "cartpole": make_cartpole,
}


def get_system(name: str, **options) -> SystemSpec:
    try:
        factory = SYSTEMS[name]
    except KeyError:
        raise KeyError(
            f"unknown system {name!r}; valid systems: {', '.join(SYSTEMS)}") from None
    return factory(**options)
