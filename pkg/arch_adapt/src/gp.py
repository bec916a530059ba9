"""
Gaussian-process regression with a radial basis function kernel.

Inputs are gene vectors already normalized to [0, 1] per dimension. The prior
mean is zero; ``center=True`` subtracts the target mean before fitting and adds
it back to predictions. A fitted GPModel is immutable and safe to share between
threads.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist

from arch_adapt.src.errors import DataError, DimensionMismatch, MalformedRecord, SingularKernel

logger = logging.getLogger(__name__)

GAMMA_GRID = tuple(float(g) for g in np.logspace(-3, 3, 13))
NOISE_GRID = (1e-6, 1e-4, 1e-2, 1e-1)
RIDGE_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0)
JITTER_LADDER = tuple(10.0 ** e for e in range(-10, -3))

MODEL_FORMAT = "arch-adapt-gp"
MODEL_VERSION = 1


@dataclass(frozen=True, eq=False)
class GPModel:
    inputs: np.ndarray
    targets: np.ndarray
    gamma: float
    noise_var: float
    factor: np.ndarray
    alpha_weights: np.ndarray
    jitter: float = 0.0
    centered: bool = False
    mean_offset: float = 0.0

    @property
    def dims(self) -> int:
        return self.inputs.shape[1]

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class Prediction:
    mean: float
    variance: float

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


def _as_observations(inputs, targets):
    X = np.array(inputs, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.array(targets, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    return X, y


def kernel(x, y, gamma: float) -> float:
    """exp(-gamma * ||x - y||^2)."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise DimensionMismatch(f"kernel arguments have lengths {x.shape[0]} and {y.shape[0]}")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    diff = x - y
    return float(np.exp(-gamma * np.dot(diff, diff)))


def kernel_matrix(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * cdist(a, b, "sqeuclidean"))


def _factorize(matrix: np.ndarray):
    """Lower Cholesky factor, escalating diagonal jitter when needed."""
    identity = np.eye(matrix.shape[0])
    for jitter in (0.0,) + JITTER_LADDER:
        try:
            factor = cholesky(matrix + jitter * identity, lower=True)
        except np.linalg.LinAlgError:
            continue
        if jitter > 0.0:
            logger.debug(f"Kernel factorized with jitter {jitter:g}")
        return factor, jitter
    raise SingularKernel(f"kernel matrix is not positive definite even with jitter {JITTER_LADDER[-1]:g}")


def _check_conflicting_duplicates(X: np.ndarray, y: np.ndarray):
    """Noiseless observations cannot give one input two different targets."""
    same = np.triu(cdist(X, X, "sqeuclidean") == 0.0, k=1)
    rows, cols = np.nonzero(same & (y[:, None] != y[None, :]))
    if rows.size:
        i, j = int(rows[0]), int(cols[0])
        logger.error(f"Observations {i} and {j} share an input but have targets {y[i]!r} and {y[j]!r}")
        raise SingularKernel(
            f"duplicate inputs with different targets (observations {i} and {j}) need noise_var > 0"
        )


def fit(inputs, targets, gamma: float, noise_var: float, center: bool = False) -> GPModel:
    """
    Fit an RBF Gaussian process to normalized genes.

    Args:
        inputs: (n, d) array of genes in the unit cube
        targets: n observed values
        gamma: Kernel inverse length scale, positive
        noise_var: Observation noise variance added to the diagonal
        center: Subtract the target mean before fitting

    Returns:
        GPModel: Immutable model holding the Cholesky factor and weights

    Raises:
        SingularKernel: Factorization failed at every jitter level, or two
            noiseless observations share an input with different targets
    """
    X, y = _as_observations(inputs, targets)
    if X.shape[0] == 0:
        raise DataError("at least one observation is required to fit a GP")
    if gamma <= 0 or noise_var < 0:
        raise ValueError("gamma must be positive and noise_var non-negative")
    if noise_var == 0:
        _check_conflicting_duplicates(X, y)
    offset = float(np.mean(y)) if center else 0.0
    residuals = y - offset
    matrix = kernel_matrix(X, X, gamma)
    matrix[np.diag_indices_from(matrix)] += noise_var
    factor, jitter = _factorize(matrix)
    weights = cho_solve((factor, True), residuals)
    return GPModel(
        inputs=_frozen(X),
        targets=_frozen(y),
        gamma=float(gamma),
        noise_var=float(noise_var),
        factor=_frozen(factor),
        alpha_weights=_frozen(weights),
        jitter=jitter,
        centered=center,
        mean_offset=offset,
    )


def predict_many(model: GPModel, points) -> tuple[np.ndarray, np.ndarray]:
    """Predictive means and latent variances for a batch of normalized genes."""
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != model.dims:
        raise DimensionMismatch(f"expected {model.dims}-dimensional inputs, got {X.shape[1]}")
    cross = kernel_matrix(model.inputs, X, model.gamma)
    means = cross.T @ model.alpha_weights + model.mean_offset
    v = solve_triangular(model.factor, cross, lower=True)
    variances = np.clip(1.0 - np.einsum("ij,ij->j", v, v), 0.0, None)
    return means, variances


def predict(model: GPModel, x) -> Prediction:
    """
    Posterior mean and latent variance at one normalized gene.

    Args:
        model: Fitted GP
        x: Gene vector in the unit cube with model.dims entries

    Returns:
        Prediction: Mean and variance; the variance excludes observation noise
    """
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != model.dims:
        raise DimensionMismatch(f"expected {model.dims}-dimensional input, got {x.shape[0]}")
    means, variances = predict_many(model, x.reshape(1, -1))
    return Prediction(float(means[0]), float(variances[0]))


def _loo_refit(X, y, gamma, noise_var, center):
    errors = []
    for i in range(X.shape[0]):
        mask = np.arange(X.shape[0]) != i
        model = fit(X[mask], y[mask], gamma, noise_var, center)
        mean = predict_many(model, X[i:i + 1])[0][0]
        errors.append((mean - y[i]) ** 2)
    return float(np.mean(errors))


def loo_mse(inputs, targets, gamma: float, noise_var: float, center: bool = False) -> float:
    """Leave-one-out mean squared error."""
    X, y = _as_observations(inputs, targets)
    if X.shape[0] < 2:
        raise DataError("leave-one-out needs at least two observations")
    if center:
        # the offset changes per fold, so refit each one
        return _loo_refit(X, y, gamma, noise_var, center)
    model = fit(X, y, gamma, noise_var)
    inverse = cho_solve((model.factor, True), np.eye(X.shape[0]))
    residuals = model.alpha_weights / np.diag(inverse)
    return float(np.mean(residuals ** 2))


def search_hyperparams(inputs, targets, center: bool = False,
                       gammas=GAMMA_GRID, noise_grid=NOISE_GRID) -> tuple[float, float, float]:
    """Grid search minimizing LOO MSE; returns (gamma, noise_var, mse)."""
    X, y = _as_observations(inputs, targets)
    if X.shape[0] < 4:
        raise DataError("hyperparameter tuning needs at least four observations")
    best = None
    for gamma in sorted(gammas):
        for noise_var in sorted(noise_grid):
            try:
                mse = loo_mse(X, y, gamma, noise_var, center)
            except SingularKernel:
                logger.debug(f"Skipping grid cell gamma={gamma:g} noise_var={noise_var:g}: singular kernel")
                continue
            if not np.isfinite(mse):
                continue
            # ties keep the earlier cell: smaller gamma, then smaller noise
            if best is None or (mse < best[2] and not math.isclose(mse, best[2], rel_tol=1e-9, abs_tol=1e-15)):
                best = (gamma, noise_var, mse)
    if best is None:
        raise SingularKernel("every hyperparameter grid cell failed to factorize")
    return best


def tune_hyperparams(inputs, targets, center: bool = False) -> tuple[float, float]:
    gamma, noise_var, mse = search_hyperparams(inputs, targets, center)
    logger.debug(f"Selected gamma={gamma:g}, noise_var={noise_var:g} (LOO MSE {mse:.3e})")
    return gamma, noise_var


def linear_loo_mse(inputs, targets, ridge: float = 0.0) -> float:
    """
    Leave-one-out MSE of least squares with an unpenalized intercept.

    ``ridge > 0`` adds an L2 penalty on the slopes. Both are linear smoothers,
    so each held-out residual is e_i / (1 - h_ii) without refitting; a point
    with leverage 1 makes the error infinite.
    """
    X, y = _as_observations(inputs, targets)
    if X.shape[0] < 2:
        raise DataError("leave-one-out needs at least two observations")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    design = np.hstack([np.ones((X.shape[0], 1)), X])
    penalty = ridge * np.eye(design.shape[1])
    penalty[0, 0] = 0.0
    hat = design @ np.linalg.pinv(design.T @ design + penalty) @ design.T
    leverage = np.diag(hat)
    if np.any(leverage >= 1.0 - 1e-12):
        return math.inf
    residuals = (y - hat @ y) / (1.0 - leverage)
    return float(np.mean(residuals ** 2))


def compare_regressors(inputs, targets, center: bool = False) -> dict[str, float]:
    """
    Leave-one-out MSE of the tuned GP next to linear baselines fit on the same data.

    Returns:
        dict: ``gp``, ``linear`` (ordinary least squares) and ``ridge`` (best of RIDGE_GRID)
    """
    _, _, gp_mse = search_hyperparams(inputs, targets, center)
    return {
        "gp": gp_mse,
        "linear": linear_loo_mse(inputs, targets),
        "ridge": min(linear_loo_mse(inputs, targets, r) for r in RIDGE_GRID),
    }


def save_model(model: GPModel, path, metadata: dict | None = None) -> Path:
    """Write the observations and hyperparameters; the factorization is recomputed on load."""
    path = Path(path)
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "gamma": model.gamma,
        "noise_var": model.noise_var,
        "center": model.centered,
        "inputs": model.inputs.tolist(),
        "targets": model.targets.tolist(),
        "metadata": metadata or {},
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_model(path) -> tuple[GPModel, dict]:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MalformedRecord(e.lineno, f"invalid JSON: {e.msg}", path)
    if payload.get("format") != MODEL_FORMAT:
        raise MalformedRecord(1, f"not a GP model file (format={payload.get('format')!r})", path)
    if payload.get("version") != MODEL_VERSION:
        raise MalformedRecord(1, f"unsupported model version {payload.get('version')!r}", path)
    inputs = np.array(payload["inputs"], dtype=float).reshape(len(payload["targets"]), -1)
    model = fit(inputs, payload["targets"], payload["gamma"], payload["noise_var"], payload["center"])
    return model, payload.get("metadata", {})
