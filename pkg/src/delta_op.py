"""
The Delta Operator A = I - beta k k^T and the rank-1 delta update built on it.

Directions, states and gates may carry leading batch axes: a direction has shape (..., d), a state (..., d, d_v), a
gate (...) or a plain scalar, and a value (..., d_v). Nothing in the hot path forms a d x d matrix; the dense operator
exists only through dense_materialize for oracle checks.
"""
import math
from dataclasses import dataclass
from typing import List, Union

import numpy as np

from tensor_core import Tensor, ops, rms_normalize

EPS_K_TRAINING = 1e-6
EPS_K_ORACLE = 0.0
DENSE_MAX_DIM = 1024
REGIME_TOLERANCE = 1e-12

Gate = Union[Tensor, float]


class DeltaOperatorError(Exception):
    pass


class ZeroDirectionError(DeltaOperatorError):
    pass


class DimensionMismatchError(DeltaOperatorError):
    pass


class OversizeError(DeltaOperatorError):
    pass


@dataclass
class UnitDirection:
    k: Tensor
    eps_k: float = EPS_K_ORACLE

    @property
    def d(self) -> int:
        return self.k.shape[-1]


@dataclass
class DeltaOperatorView:
    direction: UnitDirection
    beta: Gate

    @property
    def k(self) -> Tensor:
        return self.direction.k

    @property
    def d(self) -> int:
        return self.direction.d

    @property
    def beta_value(self) -> float:
        return float(self.beta.item()) if isinstance(self.beta, Tensor) else float(self.beta)


@dataclass
class SpectrumResult:
    eigenvalue_1: float
    multiplicity_1: int
    eigenvalue_2: float
    eigvec_2: np.ndarray

    @property
    def eigenvalues(self) -> List[float]:
        return sorted([self.eigenvalue_1] * self.multiplicity_1 + [self.eigenvalue_2])


@dataclass
class DeterminantResult:
    spatial_det: float
    lifted_det: float
    d_v: int

    @property
    def orientation_flipped(self) -> bool:
        return self.lifted_det < 0


def _as_direction(k: Union[UnitDirection, Tensor, np.ndarray]) -> UnitDirection:
    if isinstance(k, UnitDirection):
        return k
    return UnitDirection(ops.as_tensor(k))


def _gate_for(beta: Gate, like: Tensor, trailing_axes: int) -> Tensor:
    beta = ops.as_tensor(beta, like=like)
    if beta.ndim == 0:
        return beta
    return ops.reshape(beta, beta.shape + (1,) * trailing_axes)


def normalize_direction(k_tilde: Union[Tensor, np.ndarray], eps_k: float = EPS_K_TRAINING) -> UnitDirection:
    """
    Unit direction k = k_tilde / sqrt(|k_tilde|^2 + eps_k^2), computed in the precision-friendly form: RMS
    normalisation with epsilon eps_k^2 / d followed by the constant scale 1 / sqrt(d).
    """
    k_tilde = ops.as_tensor(k_tilde)
    d = k_tilde.shape[-1]
    if d < 1:
        raise DimensionMismatchError("Direction needs at least one feature")
    if eps_k == 0 and np.any(np.all(k_tilde.data == 0, axis=-1)):
        raise ZeroDirectionError("Cannot normalise a zero direction without an eps_k guard")
    k_hat = rms_normalize(k_tilde, eps=eps_k * eps_k / d)
    return UnitDirection(ops.mul(k_hat, 1.0 / math.sqrt(d)), eps_k=eps_k)


def normalize_direction_direct(k_tilde: Union[Tensor, np.ndarray], eps_k: float = EPS_K_ORACLE) -> UnitDirection:
    """Reference form k_tilde / sqrt(|k_tilde|^2 + eps_k^2)."""
    k_tilde = ops.as_tensor(k_tilde)
    if eps_k == 0 and np.any(np.all(k_tilde.data == 0, axis=-1)):
        raise ZeroDirectionError("Cannot normalise a zero direction without an eps_k guard")
    squared_norm = ops.sum(ops.mul(k_tilde, k_tilde), axis=-1, keepdims=True)
    return UnitDirection(ops.mul(k_tilde, ops.rsqrt(ops.add(squared_norm, eps_k * eps_k))), eps_k=eps_k)


def _check_state(k: Tensor, X: Tensor) -> None:
    if X.ndim < 2:
        raise DimensionMismatchError(f"State must be at least (d, d_v), got shape {X.shape}")
    if k.shape[-1] != X.shape[-2]:
        raise DimensionMismatchError(f"Direction of length {k.shape[-1]} does not match state of shape {X.shape}")


def project(k: Tensor, X: Tensor) -> Tensor:
    """Row vector k^T X of shape (..., 1, d_v)."""
    return ops.matmul(ops.unsqueeze(k, -2), X)


def apply_operator(op: DeltaOperatorView, X: Union[Tensor, np.ndarray]) -> Tensor:
    """A X = X - beta k (k^T X), through the row vector k^T X."""
    X = ops.as_tensor(X)
    k = op.k
    _check_state(k, X)
    row = project(k, X)
    beta = _gate_for(op.beta, X, 2)
    return ops.sub(X, ops.mul(beta, ops.mul(ops.unsqueeze(k, -1), row)))


def dense_materialize(op: DeltaOperatorView) -> Tensor:
    """Explicit I - beta k k^T for a single direction; oracle use only."""
    k = op.k
    if k.ndim != 1:
        raise DimensionMismatchError(f"Dense form needs a single direction, got shape {k.shape}")
    if k.shape[0] > DENSE_MAX_DIM:
        raise OversizeError(f"Refusing to materialise a {k.shape[0]}x{k.shape[0]} operator, limit is {DENSE_MAX_DIM}")
    identity = np.eye(k.shape[0], dtype=k.dtype)
    return ops.sub(identity, ops.mul(ops.as_tensor(op.beta, like=k), ops.outer(k, k)))


def spectrum(op: DeltaOperatorView, d: int) -> SpectrumResult:
    if op.d != d:
        raise DimensionMismatchError(f"Operator acts on dimension {op.d}, spectrum requested for {d}")
    return SpectrumResult(eigenvalue_1=1.0, multiplicity_1=d - 1, eigenvalue_2=1.0 - op.beta_value,
                          eigvec_2=np.array(op.k.data, copy=True))


def orthogonal_complement(k: np.ndarray) -> np.ndarray:
    """
    Orthonormal basis of the complement of unit k, as rows of a (d-1, d) array.

    Gram-Schmidt against k over the canonical vectors, skipping the one most aligned with k.
    """
    k = np.asarray(k, dtype=np.float64)
    d = k.shape[0]
    skipped = int(np.argmax(np.abs(k)))
    basis = [k / np.linalg.norm(k)]
    for i in range(d):
        if i == skipped:
            continue
        candidate = np.zeros(d)
        candidate[i] = 1.0
        for vector in basis:
            candidate = candidate - np.dot(vector, candidate) * vector
        basis.append(candidate / np.linalg.norm(candidate))
    return np.array(basis[1:]).reshape(d - 1, d)


def check_eigen_action(op: DeltaOperatorView) -> tuple:
    """
    Largest deviations |A k - (1 - beta) k|_inf and max_u |A u - u|_inf over a basis of the complement of k.
    """
    k = op.k.data
    beta = op.beta_value
    along = apply_operator(op, k.reshape(-1, 1)).data[:, 0]
    along_dev = float(np.max(np.abs(along - (1.0 - beta) * k)))
    complement = orthogonal_complement(k)
    if complement.shape[0] == 0:
        return along_dev, 0.0
    moved = apply_operator(op, complement.T.astype(k.dtype)).data
    perp_dev = float(np.max(np.abs(moved - complement.T)))
    return along_dev, perp_dev


def determinant(op: DeltaOperatorView, d_v: int) -> DeterminantResult:
    """det A = 1 - beta; the operator lifted to the d x d_v state has det (1 - beta)^d_v."""
    spatial = 1.0 - op.beta_value
    return DeterminantResult(spatial_det=spatial, lifted_det=spatial ** d_v, d_v=d_v)


def singular_values(op: DeltaOperatorView, d: int) -> List[float]:
    return sorted([1.0] * (d - 1) + [abs(1.0 - op.beta_value)])


def regime_label(beta: float) -> str:
    if abs(beta) <= REGIME_TOLERANCE:
        return "identity"
    if abs(beta - 1.0) <= REGIME_TOLERANCE:
        return "projection"
    if beta < 1.0:
        return "contraction"
    return "reflection-like"


def delta_update(X: Union[Tensor, np.ndarray], k: Union[UnitDirection, Tensor, np.ndarray], beta: Gate,
                 v: Union[Tensor, np.ndarray]) -> Tensor:
    """Additive rank-1 form X + beta k (v^T - k^T X)."""
    X = ops.as_tensor(X)
    direction = _as_direction(k)
    v = ops.as_tensor(v, like=X)
    _check_state(direction.k, X)
    if v.shape[-1] != X.shape[-1]:
        raise DimensionMismatchError(f"Value of length {v.shape[-1]} does not match state of shape {X.shape}")
    row = project(direction.k, X)
    correction = ops.sub(ops.unsqueeze(v, -2), row)
    beta = _gate_for(beta, X, 2)
    return ops.add(X, ops.mul(beta, ops.mul(ops.unsqueeze(direction.k, -1), correction)))


def diagonal_case(s: Union[Tensor, np.ndarray], k: Union[UnitDirection, Tensor, np.ndarray], beta: Gate) -> Tensor:
    """A diag(s): entry (i, j) is s_i delta_ij - beta s_j k_i k_j."""
    s = ops.as_tensor(s)
    k = _as_direction(k).k
    if s.shape[-1] != k.shape[-1]:
        raise DimensionMismatchError(f"Diagonal of length {s.shape[-1]} does not match direction {k.shape}")
    diagonal = np.eye(s.shape[-1], dtype=s.dtype)
    coupling = ops.mul(ops.outer(k, k), ops.unsqueeze(s, -2))
    return ops.sub(ops.mul(ops.unsqueeze(s, -1), diagonal), ops.mul(_gate_for(beta, s, 2), coupling))
