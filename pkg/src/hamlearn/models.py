"""Learnable Hamiltonians.

Two variants share one parameter container:

* ``separable``: H(q, p) = 1/2 p^T (A^T A + ridge I) p + V(q) on R^{2n};
  A parametrizes the inverse mass matrix.
* ``chain``: H(q, p) = 1/2 p^T M(q)^{-1} p + V(q) on (T*S^2)^k, where M(q)
  has blocks m_ii I and m_ij (I - q_i q_i^T) built from the scalar mass
  matrix m = A^T A + diag(max(0, b)).

V is a tanh feedforward network with an affine output layer. Its gradient
with respect to q is assembled from the same diffcore primitives as the
forward pass, so the model can sit inside a rollout graph and still be
differentiated with respect to its parameters in one reverse pass.

Flat parameter ordering: A (row-major), b, then for each layer W_i
(row-major) followed by its bias.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import GradientPair
from .geometry import sphere_field

FORMAT_NAME = "hamlearn-model"
FORMAT_VERSION = 1
VARIANTS = ("separable", "chain")


class ModelFormatError(ValueError):
    pass


class ChecksumError(ModelFormatError):
    pass


class VersionError(ModelFormatError):
    pass


class MassMatrixError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class ModelParams:
    variant: str
    A: object
    b: object
    layers: tuple
    activation: str = "tanh"
    ridge: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}")
        if self.activation != "tanh":
            raise ValueError("tanh is the only supported activation")
        if not self.layers:
            raise ValueError("potential needs at least one layer")
        prev = _shape(self.layers[0][0])[1]
        for W, c in self.layers:
            sw, sc = _shape(W), _shape(c)
            if sw[1] != prev or sc != (sw[0],):
                raise ValueError(f"layer shapes do not chain: W {sw}, bias {sc}, input {prev}")
            prev = sw[0]
        if prev != 1:
            raise ValueError("final layer must have a single output")
        a = _shape(self.A)
        if len(a) != 2 or a[0] != a[1]:
            raise ValueError(f"A must be square, got {a}")
        if self.variant == "chain" and _shape(self.b) != (a[0],):
            raise ValueError("chain variant needs b of length k")
        if self.input_dim != self.config_dim:
            raise ValueError(f"first layer expects {self.input_dim} inputs, model needs {self.config_dim}")

    @property
    def size(self) -> int:
        """k for chains, n for separable models."""
        return _shape(self.A)[0]

    @property
    def config_dim(self) -> int:
        return 3 * self.size if self.variant == "chain" else self.size

    @property
    def phase_dim(self) -> int:
        return 2 * self.config_dim

    @property
    def input_dim(self) -> int:
        return _shape(self.layers[0][0])[1]

    @property
    def hidden(self) -> tuple:
        return tuple(_shape(W)[0] for W, _ in self.layers[:-1])

    def leaves(self) -> list:
        out = [self.A, self.b]
        for W, c in self.layers:
            out.extend((W, c))
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.ravel(dc.value(x)) for x in self.leaves()])

    @property
    def n_params(self) -> int:
        return int(sum(np.size(dc.value(x)) for x in self.leaves()))

    def unflatten(self, vec) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        arrays = []
        pos = 0
        for x in self.leaves():
            shape = _shape(x)
            size = int(np.prod(shape))
            arrays.append(vec[pos:pos + size].reshape(shape).copy())
            pos += size
        return self._rebuild(arrays)

    def as_nodes(self) -> "ModelParams":
        """Copy whose arrays are fresh parameter nodes."""
        return self._rebuild([dc.parameter(dc.value(x)) for x in self.leaves()])

    def _rebuild(self, arrays) -> "ModelParams":
        layers = tuple((arrays[i], arrays[i + 1]) for i in range(2, len(arrays), 2))
        return replace(self, A=arrays[0], b=arrays[1], layers=layers)


def _shape(x):
    return np.shape(dc.value(x))


def init_model(variant: str, size: int, hidden: Sequence[int] = (100, 100, 100),
               seed: int = 0, ridge: float = 0.0) -> ModelParams:
    """Fresh parameters: A = I, b = 0, layers uniform in +-1/sqrt(fan_in).

    ``size`` is n for separable models and k for chains. ``hidden=()`` gives
    a single affine (linear) potential.
    """
    rng = np.random.default_rng(seed)
    d = 3 * size if variant == "chain" else size
    widths = [d, *hidden, 1]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, (fan_out, fan_in))
        c = rng.uniform(-bound, bound, fan_out)
        layers.append((W, c))
    b = np.zeros(size) if variant == "chain" else np.zeros(0)
    return ModelParams(variant, np.eye(size), b, tuple(layers), ridge=ridge)


# potential --------------------------------------------------------------

def potential_forward(layers, q):
    """V_theta(q) with shape (..., 1)."""
    a = q
    for W, c in layers[:-1]:
        a = dc.tanh(dc.matmul(a, dc.transpose(W)) + c)
    W, c = layers[-1]
    return dc.matmul(a, dc.transpose(W)) + c


def potential_with_grad(layers, q):
    """(V_theta(q), dV/dq) with the gradient built from forward primitives."""
    acts = []
    a = q
    for W, c in layers[:-1]:
        a = dc.tanh(dc.matmul(a, dc.transpose(W)) + c)
        acts.append(a)
    W, c = layers[-1]
    V = dc.matmul(a, dc.transpose(W)) + c
    lead = np.shape(dc.value(q))[:-1]
    g = dc.mul(np.ones(lead + (1,)), W)
    for (W, _), act in zip(reversed(layers[:-1]), reversed(acts)):
        g = dc.matmul(g * (1.0 - act * act), W)
    return V, g


# kinetic terms -------------------------------------------------------------

def kinetic_separable(A, p, ridge: float = 0.0):
    """1/2 p^T (A^T A) p (+ ridge/2 |p|^2), shape (..., 1)."""
    u = dc.matmul(p, dc.transpose(A))
    K = dc.dot(u, u) * 0.5
    if ridge:
        K = K + dc.dot(p, p) * (0.5 * ridge)
    return K


def _kinetic_separable_grad(A, p, ridge: float = 0.0):
    g = dc.matmul(dc.matmul(p, dc.transpose(A)), A)
    if ridge:
        g = g + p * ridge
    return g


def chain_scalar_mass(A, b):
    """A^T A + diag(max(0, b))."""
    k = _shape(A)[0]
    return dc.matmul(dc.transpose(A), A) + np.eye(k) * dc.relu(b)


def chain_mass_matrix(m, q):
    """(..., 3k, 3k) block mass matrix for unit q of shape (..., k, 3)."""
    qshape = _shape(q)
    k = qshape[-2]
    lead = qshape[:-2]
    eye = np.broadcast_to(np.eye(3), lead + (3, 3))
    rows = []
    for i in range(k):
        qi = q[..., i, :]
        proj = eye - dc.reshape(qi, lead + (3, 1)) * dc.reshape(qi, lead + (1, 3))
        blocks = [eye * m[i, j] if i == j else proj * m[i, j] for j in range(k)]
        rows.append(dc.concatenate(blocks, axis=-1))
    return dc.concatenate(rows, axis=-2)


def _solve_checked(M, rhs, m):
    try:
        return dc.solve(M, rhs)
    except np.linalg.LinAlgError:
        pivot = cholesky_pivot(dc.value(m))
        where = "scalar mass matrix" if pivot is not None else "block mass matrix"
        raise MassMatrixError(f"mass matrix solve failed; {where} not positive definite "
                              f"(Cholesky pivot {pivot})") from None


def cholesky_pivot(m) -> int | None:
    """Index of the first non-positive Cholesky pivot of m, or None if SPD."""
    m = np.array(m, dtype=float)
    n = m.shape[0]
    L = np.zeros_like(m)
    for j in range(n):
        d = m[j, j] - L[j, :j] @ L[j, :j]
        if not d > 0.0:
            return j
        L[j, j] = np.sqrt(d)
        for i in range(j + 1, n):
            L[i, j] = (m[i, j] - L[i, :j] @ L[j, :j]) / L[j, j]
    return None


def chain_kinetic_parts(m, q, p):
    """(K, dK/dq, dK/dp) for K = 1/2 p^T M(q)^{-1} p.

    M(q) is not symmetric off the diagonal blocks, so with y = M^{-1} p and
    z = M^{-T} p: dK/dp = (y + z)/2 and dK/dq_i =
    1/2 sum_{j != i} m_ij [(q_i.y_j) z_i + (q_i.z_i) y_j].
    """
    qshape = _shape(q)
    k = qshape[-2]
    lead = qshape[:-2]
    if k == 1:
        # M = m_11 I exactly
        y = p / m
        K = dc.dot(p, y) * 0.5
        return dc.reshape(K, lead + (1,)), q * 0.0, y
    M = chain_mass_matrix(m, q)
    flat = dc.reshape(p, lead + (3 * k,))
    y = dc.reshape(_solve_checked(M, flat, m), qshape)
    z = dc.reshape(_solve_checked(dc.transpose(M), flat, m), qshape)
    K = dc.reshape(dc.sum(dc.dot(p, y), axis=-2), lead + (1,)) * 0.5
    gp = (y + z) * 0.5
    gq_rows = []
    for i in range(k):
        qi, zi = q[..., i, :], z[..., i, :]
        acc = None
        for j in range(k):
            if i == j:
                continue
            yj = y[..., j, :]
            term = (dc.dot(qi, yj) * zi + dc.dot(qi, zi) * yj) * (m[i, j] * 0.5)
            acc = term if acc is None else acc + term
        gq_rows.append(acc)
    return K, dc.stack(gq_rows, axis=-2), gp


# full Hamiltonian ----------------------------------------------------------

def hamiltonian_parts(params: ModelParams, q, p):
    """(H, dH/dq, dH/dp) on a batch; H has shape (..., 1)."""
    if params.variant == "separable":
        V, gV = potential_with_grad(params.layers, q)
        K = kinetic_separable(params.A, p, params.ridge)
        return K + V, gV, _kinetic_separable_grad(params.A, p, params.ridge)
    qshape = _shape(q)
    lead = qshape[:-2]
    qflat = dc.reshape(q, lead + (qshape[-2] * 3,))
    V, gV = potential_with_grad(params.layers, qflat)
    m = chain_scalar_mass(params.A, params.b)
    K, gKq, gKp = chain_kinetic_parts(m, q, p)
    return K + V, gKq + dc.reshape(gV, qshape), gKp


def split_phase(params: ModelParams, x):
    """Split a flat phase vector (..., 2d) into model-shaped (q, p)."""
    x = np.asarray(x, dtype=np.float64)
    d = params.config_dim
    if x.shape[-1] != 2 * d:
        raise ValueError(f"phase dimension {x.shape[-1]} does not match model ({2 * d})")
    q, p = x[..., :d], x[..., d:]
    if params.variant == "chain":
        q = q.reshape(q.shape[:-1] + (params.size, 3))
        p = p.reshape(p.shape[:-1] + (params.size, 3))
    return q, p


def hamiltonian_model_eval(params: ModelParams, x) -> GradientPair:
    """H_theta(x) and its gradient at a single flat phase point x = (q, p)."""
    q, p = split_phase(params, x)
    H, gq, gp = hamiltonian_parts(params, q[None], p[None])
    grad = np.concatenate([np.ravel(dc.value(gq)), np.ravel(dc.value(gp))])
    return GradientPair(float(np.ravel(dc.value(H))[0]), grad)


@dataclass
class HamiltonianModel:
    """System-like view of a parameter set, usable wherever a true system is.

    The parameters may hold graph nodes, in which case every quantity
    computed through this object is recorded.
    """

    params: ModelParams
    manifold: str = field(init=False)

    def __post_init__(self):
        self.manifold = "sphere" if self.params.variant == "chain" else "flat"

    @property
    def phase_dim(self) -> int:
        return self.params.phase_dim

    def hamiltonian(self, q, p):
        H, _, _ = hamiltonian_parts(self.params, q, p)
        return H[..., 0]

    def gradients(self, q, p):
        _, gq, gp = hamiltonian_parts(self.params, q, p)
        return gq, gp

    def grad_potential(self, q):
        if self.params.variant != "separable":
            raise TypeError("grad_potential is only defined for separable models")
        return potential_with_grad(self.params.layers, q)[1]

    def grad_kinetic(self, p):
        if self.params.variant != "separable":
            raise TypeError("grad_kinetic is only defined for separable models")
        return _kinetic_separable_grad(self.params.A, p, self.params.ridge)

    def field(self, q, p):
        gq, gp = self.gradients(q, p)
        if self.manifold == "sphere":
            return sphere_field(gq, gp, q, p)
        return gp, -gq


def true_chain_params(scalar_mass, potential_coeffs) -> ModelParams:
    """Chain parameters reproducing a pendulum chain with linear potential exactly."""
    m = np.asarray(scalar_mass, dtype=float)
    A = np.linalg.cholesky(m).T
    W = np.asarray(potential_coeffs, dtype=float).reshape(1, -1)
    return ModelParams("chain", A, np.zeros(m.shape[0]), ((W, np.zeros(1)),))


# serialization --------------------------------------------------------------

def _fmt(x: float) -> str:
    x = float(x)
    if not np.isfinite(x):
        raise ValueError("cannot serialize non-finite parameter values")
    return format(x, ".17g")


def _array_text(a) -> str:
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return _fmt(a)
    if a.ndim == 1:
        return "[" + ", ".join(_fmt(v) for v in a) + "]"
    return "[" + ", ".join(_array_text(row) for row in a) + "]"


def serialize_model(params: ModelParams, meta: dict | None = None) -> bytes:
    """Text model file: a JSON document plus a trailing ``sha256 <hex>`` line."""
    A = dc.value(params.A)
    b = dc.value(params.b)
    dims = {
        "size": params.size,
        "A": list(np.shape(A)),
        "b": list(np.shape(b)),
        "layers": [list(_shape(W)) for W, _ in params.layers],
    }
    layer_txt = ",\n    ".join(
        '{"W": ' + _array_text(dc.value(W)) + ', "bias": ' + _array_text(dc.value(c)) + "}"
        for W, c in params.layers)
    lines = [
        "{",
        f'  "format": "{FORMAT_NAME}",',
        f'  "version": {FORMAT_VERSION},',
        f'  "variant": "{params.variant}",',
        f'  "activation": "{params.activation}",',
        f'  "ridge": {_fmt(params.ridge)},',
        f'  "dims": {json.dumps(dims, sort_keys=True)},',
        f'  "meta": {json.dumps(meta or {}, sort_keys=True)},',
        f'  "A": {_array_text(A)},',
        f'  "b": {_array_text(b)},',
        f'  "layers": [\n    {layer_txt}\n  ]',
        "}",
    ]
    body = ("\n".join(lines) + "\n").encode()
    return body + b"sha256 " + hashlib.sha256(body).hexdigest().encode() + b"\n"


def deserialize_model(data: bytes) -> ModelParams:
    return read_model_document(data)[0]


def read_model_document(data: bytes) -> tuple[ModelParams, dict]:
    """Parse a model file into (params, meta), verifying checksum and version."""
    text = data.rstrip(b"\n")
    cut = text.rfind(b"\n")
    body, last = text[: cut + 1], text[cut + 1:]
    if not last.startswith(b"sha256 "):
        raise ChecksumError("model file has no checksum line (truncated?)")
    if hashlib.sha256(body).hexdigest().encode() != last[len(b"sha256 "):].strip():
        raise ChecksumError("model file checksum mismatch")
    try:
        doc = json.loads(body)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file is not valid JSON: {exc}") from None
    if doc.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"not a {FORMAT_NAME} file")
    if doc.get("version") != FORMAT_VERSION:
        raise VersionError(f"model file version {doc.get('version')!r} is not supported "
                           f"(expected {FORMAT_VERSION})")
    dims = doc["dims"]
    A = np.array(doc["A"], dtype=float).reshape(dims["A"])
    b = np.array(doc["b"], dtype=float).reshape(dims["b"])
    layers = tuple((np.array(L["W"], dtype=float).reshape(s), np.array(L["bias"], dtype=float).reshape(s[0]))
                   for L, s in zip(doc["layers"], dims["layers"]))
    params = ModelParams(doc["variant"], A, b, layers, doc["activation"], float(doc["ridge"]))
    return params, doc.get("meta", {})
