"""Built-in deterministic maps and their Jacobians.

Every builder returns a pair ``(pi, jac)`` of callables operating on points of
shape ``(d,)``: ``pi`` returns the image point, ``jac`` the d x d Jacobian.
Maps are registered under a string id so they can be named in run configs.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

_REGISTRY = {}


def register(name):
    def deco(fn):
        _REGISTRY[name] = fn
        return fn
    return deco


def builtin_names():
    return sorted(_REGISTRY)


def build_map(name, params):
    """Instantiate a registered map; returns (dimension, pi, jac)."""
    if name not in _REGISTRY:
        raise ConfigError(f"unknown map '{name}'; known: {builtin_names()}")
    return _REGISTRY[name](dict(params or {}))


@register("tanh")
def _tanh(params):
    beta = float(params.pop("beta", 2.0))
    _no_extra(params, "tanh")

    def pi(x):
        return np.tanh(beta * x)

    def jac(x):
        return np.array([[beta * (1.0 - np.tanh(beta * x[0]) ** 2)]])

    return 1, pi, jac


@register("cubic")
def _cubic(params):
    a = float(params.pop("a", 1.8))
    b = float(params.pop("b", 1.0))
    d = float(params.pop("d", 0.0))
    _no_extra(params, "cubic")

    def pi(x):
        return a * x - b * x ** 3 + d

    def jac(x):
        return np.array([[a - 3.0 * b * x[0] ** 2]])

    return 1, pi, jac


@register("linear")
def _linear(params):
    a = float(params.pop("a", 0.5))
    _no_extra(params, "linear")

    def pi(x):
        return a * x

    def jac(x):
        return a * np.eye(x.size)

    return 1, pi, jac


@register("poly")
def _poly(params):
    # 1D polynomial sum_k c_k x^k, coefficients in increasing degree
    coeffs = np.asarray(params.pop("coeffs"), dtype=float)
    _no_extra(params, "poly")
    if coeffs.ndim != 1 or coeffs.size < 2:
        raise ConfigError("poly map needs a 1D 'coeffs' list of length >= 2")
    dcoeffs = coeffs[1:] * np.arange(1, coeffs.size)

    def pi(x):
        return np.polynomial.polynomial.polyval(x, coeffs)

    def jac(x):
        return np.array([[np.polynomial.polynomial.polyval(x[0], dcoeffs)]])

    return 1, pi, jac


@register("tanh2d")
def _tanh2d(params):
    beta = params.pop("beta", (2.0, 2.0))
    _no_extra(params, "tanh2d")
    b1, b2 = float(beta[0]), float(beta[1])

    def pi(x):
        return np.array([np.tanh(b1 * x[0]), np.tanh(b2 * x[1])])

    def jac(x):
        return np.diag([b1 * (1.0 - np.tanh(b1 * x[0]) ** 2),
                        b2 * (1.0 - np.tanh(b2 * x[1]) ** 2)])

    return 2, pi, jac


@register("coupled2d")
def _coupled2d(params):
    beta = params.pop("beta", (2.0, 2.0))
    gamma = float(params.pop("gamma", 0.3))
    _no_extra(params, "coupled2d")
    b1, b2 = float(beta[0]), float(beta[1])

    def pi(x):
        return np.array([np.tanh(b1 * x[0] + gamma * x[1]),
                         np.tanh(b2 * x[1] + gamma * x[0])])

    def jac(x):
        s1 = 1.0 - np.tanh(b1 * x[0] + gamma * x[1]) ** 2
        s2 = 1.0 - np.tanh(b2 * x[1] + gamma * x[0]) ** 2
        return np.array([[b1 * s1, gamma * s1],
                         [gamma * s2, b2 * s2]])

    return 2, pi, jac


def _no_extra(params, name):
    if params:
        raise ConfigError(f"unknown parameters for map '{name}': {sorted(params)}")
