"""Strain-stress phase space: states, metrics, distances and the material database.

Symmetric 2D tensors are stored as 3-vectors in Mandel form
``(t_xx, t_yy, sqrt(2)*t_xy)`` so that the tensor double contraction equals
the plain dot product of the vectors.  A local state pairs a strain and a
stress tensor; the database is an ordered point cloud of such states with a
k-d tree index over metric-embedded coordinates, making Euclidean search in
the embedding identical to phase-space distance search.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import NumericsError, UnsupportedMetricError

_SQRT2 = np.sqrt(2.0)

# Relative slack used to detect exact distance ties (duplicates, symmetric
# constructions); ties resolve to the lowest database index.
_TIE_RTOL = 1e-12


def n_workers() -> int:
    """Thread count for k-d tree queries (DDMECH_THREADS, default: all cores)."""
    raw = os.environ.get("DDMECH_THREADS", "")
    try:
        n = int(raw)
        return n if n > 0 else -1
    except ValueError:
        return -1


def tensor_to_mandel(t: np.ndarray) -> np.ndarray:
    """Convert tensor components (xx, yy, xy) to Mandel form, last axis length 3."""
    t = np.asarray(t, dtype=float)
    out = t.copy()
    out[..., 2] *= _SQRT2
    return out


def mandel_to_tensor(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`tensor_to_mandel`."""
    m = np.asarray(m, dtype=float)
    out = m.copy()
    out[..., 2] /= _SQRT2
    return out


@dataclass(frozen=True)
class LocalState:
    """One strain-stress pair, both tensors in Mandel form.

    Attributes
    ----------
    eps : (3,) array
        Strain ``(e_xx, e_yy, sqrt(2)*e_xy)``, dimensionless.
    sig : (3,) array
        Stress ``(s_xx, s_yy, sqrt(2)*s_xy)`` in Pa.
    """

    eps: np.ndarray
    sig: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "eps", np.asarray(self.eps, dtype=float).reshape(3))
        object.__setattr__(self, "sig", np.asarray(self.sig, dtype=float).reshape(3))

    @classmethod
    def zero(cls) -> "LocalState":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_tensor(cls, eps_t, sig_t) -> "LocalState":
        """Build from tensor components (xx, yy, xy)."""
        return cls(tensor_to_mandel(eps_t), tensor_to_mandel(sig_t))

    def as_vector(self) -> np.ndarray:
        """Concatenated (eps, sig) 6-vector."""
        return np.concatenate([self.eps, self.sig])


def _as_state_array(zs) -> np.ndarray:
    """Accept an (M, 6) array, a LocalState, or a sequence of LocalState."""
    if isinstance(zs, LocalState):
        return zs.as_vector()[None, :]
    if isinstance(zs, np.ndarray):
        arr = np.asarray(zs, dtype=float)
        return arr[None, :] if arr.ndim == 1 else arr
    return np.array([z.as_vector() for z in zs], dtype=float)


class Metric:
    """SPD phase-space metric ``|z|^2 = C e.e + C^{-1} s.s`` in Mandel form.

    The Cholesky factor ``L`` (``C = L L^T``) provides the linear embedding
    ``(L^T e, L^{-1} s)`` under which the phase-space norm is the Euclidean
    norm, exactly.
    """

    def __init__(self, C: np.ndarray):
        C = np.asarray(C, dtype=float)
        if C.shape != (3, 3):
            raise ValueError(f"metric must be 3x3, got {C.shape}")
        scale = np.abs(C).max()
        if not np.allclose(C, C.T, atol=1e-12 * scale):
            raise ValueError("metric matrix must be symmetric")
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError as exc:
            raise ValueError("metric matrix must be positive definite") from exc
        self.C = 0.5 * (C + C.T)
        self.L = L
        self.C_inv = np.linalg.inv(self.C)
        self._L_inv = np.linalg.inv(L)

    @classmethod
    def isotropic_plane_strain(cls, E: float, nu: float) -> "Metric":
        """Plane-strain Hooke matrix for Young's modulus E (Pa), Poisson nu."""
        lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        mu = E / (2.0 * (1.0 + nu))
        C = np.array(
            [
                [lam + 2.0 * mu, lam, 0.0],
                [lam, lam + 2.0 * mu, 0.0],
                [0.0, 0.0, 2.0 * mu],
            ]
        )
        return cls(C)

    # -- embeddings ---------------------------------------------------------
    def embed_strain(self, eps: np.ndarray) -> np.ndarray:
        """Map strains so the C-norm becomes Euclidean: e -> L^T e."""
        return np.asarray(eps, dtype=float) @ self.L

    def embed_stress(self, sig: np.ndarray) -> np.ndarray:
        """Map stresses so the C^{-1}-norm becomes Euclidean: s -> L^{-1} s."""
        return np.asarray(sig, dtype=float) @ self._L_inv.T

    def embed_states(self, zs: np.ndarray) -> np.ndarray:
        """Embed (M, 6) state rows into the 6D Euclidean space."""
        zs = np.asarray(zs, dtype=float)
        out = np.empty_like(zs)
        out[..., :3] = self.embed_strain(zs[..., :3])
        out[..., 3:] = self.embed_stress(zs[..., 3:])
        return out

    def unembed_strain(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) @ self._L_inv

    # -- isotropy -----------------------------------------------------------
    def is_isotropic(self, rtol: float = 1e-9) -> bool:
        """True when C commutes with in-plane rotations (Mandel form)."""
        C = self.C
        s = np.abs(C).max()
        return (
            abs(C[0, 0] - C[1, 1]) <= rtol * s
            and abs(C[0, 2]) <= rtol * s
            and abs(C[1, 2]) <= rtol * s
            and abs(C[2, 2] - (C[0, 0] - C[0, 1])) <= rtol * s
        )

    def isotropic_coefficients(self) -> tuple[float, float]:
        """(c_h, c_d): eigenvalues of C on the hydrostatic / deviatoric parts."""
        if not self.is_isotropic():
            raise UnsupportedMetricError(
                "metric is anisotropic; rotation-minimized distance undefined"
            )
        return self.C[0, 0] + self.C[0, 1], self.C[0, 0] - self.C[0, 1]


def _split_hyd_dev(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal split of Mandel vectors: hydrostatic scalar + 2D deviator.

    Norm-preserving: ``|m|^2 = h^2 + |d|^2``.
    """
    m = np.asarray(m, dtype=float)
    h = (m[..., 0] + m[..., 1]) / _SQRT2
    d = np.stack([(m[..., 0] - m[..., 1]) / _SQRT2, m[..., 2]], axis=-1)
    return h, d


def _join_hyd_dev(h: np.ndarray, d: np.ndarray) -> np.ndarray:
    out = np.empty(np.shape(h) + (3,))
    out[..., 0] = (h + d[..., 0]) / _SQRT2
    out[..., 1] = (h - d[..., 0]) / _SQRT2
    out[..., 2] = d[..., 1]
    return out


def local_norm(z, metric: Metric) -> float:
    """Phase-space norm ``(C e.e + C^{-1} s.s)^(1/2)`` of one state."""
    v = _as_state_array(z)[0]
    eps, sig = v[:3], v[3:]
    val = eps @ metric.C @ eps + sig @ metric.C_inv @ sig
    return float(np.sqrt(val))


def global_distance(zs, ys, weights, metric: Metric) -> float:
    """Weighted aggregate distance ``(sum_e w_e |z_e - y_e|^2)^(1/2)``."""
    Z = _as_state_array(zs)
    Y = _as_state_array(ys)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if not (Z.shape == Y.shape and Z.shape[0] == w.shape[0]):
        raise ValueError(
            f"length mismatch: states {Z.shape[0]} vs {Y.shape[0]}, weights {w.shape[0]}"
        )
    d = metric.embed_states(Z) - metric.embed_states(Y)
    return float(np.sqrt(np.sum(w * np.einsum("ij,ij->i", d, d))))


class MaterialDatabase:
    """Ordered strain-stress point cloud with metric-scaled nearest-neighbor index.

    Immutable once built.  Queries through the 6D embedded k-d tree return
    the same index as an exhaustive scan (exact search; ties go to the
    lowest index).
    """

    def __init__(self, states: np.ndarray, metric: Metric, tensor_rows: np.ndarray | None = None):
        states = np.asarray(states, dtype=float)
        if states.ndim != 2 or states.shape[1] != 6:
            raise ValueError("states must be an (N, 6) array of Mandel pairs")
        if states.shape[0] == 0:
            raise ValueError("material database may not be empty")
        if not np.all(np.isfinite(states)):
            raise ValueError("material database contains non-finite components")
        self._states = states
        self._states.setflags(write=False)
        self.metric = metric
        # exact tensor-component representation (file units), kept when the
        # database came from a file or a tensor grid so rewrites are lossless
        self._tensor_rows = tensor_rows
        self._embedded = metric.embed_states(states)
        self._tree = cKDTree(self._embedded)
        self._iso_tree: cKDTree | None = None
        self._iso_feats: np.ndarray | None = None

    def __len__(self) -> int:
        return self._states.shape[0]

    @property
    def states_mandel(self) -> np.ndarray:
        """(N, 6) read-only view: rows are (eps, sig) Mandel pairs."""
        return self._states

    @property
    def tensor_rows(self) -> np.ndarray:
        """(N, 6) rows in tensor components (eps_xx, eps_yy, eps_xy, sig...)."""
        if self._tensor_rows is not None:
            return self._tensor_rows
        out = np.empty_like(self._states)
        out[:, :3] = mandel_to_tensor(self._states[:, :3])
        out[:, 3:] = mandel_to_tensor(self._states[:, 3:])
        return out

    def reindexed(self, metric: Metric) -> "MaterialDatabase":
        """Same states indexed under a different metric."""
        return MaterialDatabase(self._states, metric, tensor_rows=self._tensor_rows)

    def state(self, i: int) -> LocalState:
        row = self._states[i]
        return LocalState(row[:3].copy(), row[3:].copy())

    # -- standard nearest-neighbor ------------------------------------------
    def query(self, zs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest database entry for each state row.

        Returns (indices, squared distances).  Exact ties (within 1e-12
        relative) resolve to the lowest index.
        """
        Z = np.atleast_2d(np.asarray(zs, dtype=float))
        emb = self.metric.embed_states(Z)
        k = min(4, len(self))
        dist, idx = self._tree.query(emb, k=k, workers=n_workers())
        if k == 1:
            return idx.reshape(-1), (dist.reshape(-1)) ** 2
        # lowest index among near-exact ties with the best candidate
        best = dist[:, 0][:, None]
        tied = dist <= best * (1.0 + _TIE_RTOL) + 1e-300
        sel = np.where(tied, idx, len(self))
        out_idx = sel.min(axis=1)
        d0 = dist[np.arange(len(Z)), np.argmax(idx == out_idx[:, None], axis=1)]
        return out_idx, d0**2

    # -- rotation-minimized (isotropic) search ------------------------------
    def _iso_invariants(self, zs: np.ndarray) -> np.ndarray:
        """4D rotation-invariant embedding whose Euclidean distance lower-bounds
        the rotation-minimized phase-space distance."""
        ch, cd = self.metric.isotropic_coefficients()
        he, de = _split_hyd_dev(zs[:, :3])
        hs, ds = _split_hyd_dev(zs[:, 3:])
        return np.stack(
            [
                np.sqrt(ch) * he,
                hs / np.sqrt(ch),
                np.sqrt(cd) * np.linalg.norm(de, axis=-1),
                np.linalg.norm(ds, axis=-1) / np.sqrt(cd),
            ],
            axis=-1,
        )

    def _ensure_iso_tree(self):
        if self._iso_tree is None:
            self._iso_feats = self._iso_invariants(self._states)
            self._iso_tree = cKDTree(self._iso_feats)

    def query_isotropic(
        self, zs: np.ndarray, k0: int = 32, verify_every: int = 0
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest entry under the rotation-minimized distance.

        Candidates come from a k-d tree over rotation-invariant coordinates
        (a provable lower bound of the orbit distance); the analytic
        single-angle minimization then ranks them exactly.  k escalates
        until the lower bound certifies the result, so the search is exact.

        Returns (indices, optimal angles, squared distances).  With
        ``verify_every = n > 0`` every n-th query is cross-checked against
        an exhaustive scan.
        """
        self._ensure_iso_tree()
        Z = np.atleast_2d(np.asarray(zs, dtype=float))
        M, N = Z.shape[0], len(self)
        feats = self._iso_invariants(Z)
        idx_out = np.zeros(M, dtype=np.int64)
        th_out = np.zeros(M)
        d2_out = np.full(M, np.inf)
        pending = np.arange(M)
        k = min(k0, N)
        while pending.size:
            lb, cand = self._iso_tree.query(feats[pending], k=k, workers=n_workers())
            lb = lb.reshape(pending.size, k)
            cand = cand.reshape(pending.size, k)
            d2, th = _orbit_distance2_batch(
                Z[pending][:, None, :], self._states[cand], self.metric
            )
            # deterministic tie-break: lowest index among near-equal minima
            best = d2.min(axis=1)[:, None]
            tied = d2 <= best * (1.0 + _TIE_RTOL) + 1e-300
            sel = np.where(tied, cand, N)
            j_idx = sel.min(axis=1)
            pick = np.argmax(cand == j_idx[:, None], axis=1)
            rows = np.arange(pending.size)
            d2_best = d2[rows, pick]
            idx_out[pending] = j_idx
            th_out[pending] = th[rows, pick]
            d2_out[pending] = d2_best
            if k >= N:
                break
            # certified when the k-th lower bound already exceeds the best
            not_done = lb[:, -1] ** 2 < d2_best * (1.0 - 1e-12)
            pending = pending[not_done]
            k = min(4 * k, N)
        if verify_every > 0:
            self._verify_iso(Z, idx_out, d2_out, verify_every)
        return idx_out, th_out, d2_out

    def _verify_iso(self, Z, idx_out, d2_out, every: int):
        check = np.arange(0, Z.shape[0], every)
        d2, _ = _orbit_distance2_batch(
            Z[check][:, None, :], self._states[None, :, :], self.metric
        )
        ref = d2.argmin(axis=1)
        ok = (ref == idx_out[check]) | np.isclose(
            d2[np.arange(check.size), ref], d2_out[check], rtol=1e-10, atol=0.0
        )
        if not np.all(ok):
            raise NumericsError("isotropic candidate search missed the true optimum")


def _orbit_distance2_batch(Z, Y, metric: Metric):
    """Rotation-minimized squared distances between broadcastable state arrays.

    Z, Y broadcast to a common shape (..., 6).  Returns (d2, theta) with the
    minimizing angle in (-pi/2, pi/2].
    """
    ch, cd = metric.isotropic_coefficients()
    he, de = _split_hyd_dev(Z[..., :3])
    hs, ds = _split_hyd_dev(Z[..., 3:])
    ge, ee = _split_hyd_dev(Y[..., :3])
    gs, es = _split_hyd_dev(Y[..., 3:])
    const = (
        ch * (he - ge) ** 2
        + (hs - gs) ** 2 / ch
        + cd * (np.sum(de * de, axis=-1) + np.sum(ee * ee, axis=-1))
        + (np.sum(ds * ds, axis=-1) + np.sum(es * es, axis=-1)) / cd
    )
    def cross(a, b):
        return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]

    # squared distance(theta) = const - 2 (A cos 2theta + B sin 2theta)
    A = cd * np.sum(de * ee, axis=-1) + np.sum(ds * es, axis=-1) / cd
    B = cd * cross(de, ee) + cross(ds, es) / cd
    amp = np.hypot(A, B)
    d2 = np.maximum(const - 2.0 * amp, 0.0)
    theta = 0.5 * np.arctan2(B, A)
    return d2, theta


def rotate_states(states: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Apply the in-plane conjugation R(theta)^T t R(theta) to Mandel state rows."""
    states = np.asarray(states, dtype=float)
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(2.0 * theta), np.sin(2.0 * theta)
    out = np.empty_like(states)
    for off in (0, 3):
        h, d = _split_hyd_dev(states[..., off : off + 3])
        d_rot = np.stack(
            [c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]],
            axis=-1,
        )
        out[..., off : off + 3] = _join_hyd_dev(h, d_rot)
    return out


def optimal_rotation_2d(z, y, metric: Metric) -> tuple[float, LocalState, float]:
    """Best simultaneous rotation of state `y` toward state `z`.

    Minimizes ``|z - (R^T e R, R^T s R)|`` over the rotation angle; for an
    isotropic metric the squared distance is ``const + A cos(2 theta) +
    B sin(2 theta)`` and the minimizer is analytic.

    Returns (theta in (-pi/2, pi/2], rotated state, distance).
    """
    zv = _as_state_array(z)
    yv = _as_state_array(y)
    d2, th = _orbit_distance2_batch(zv, yv, metric)
    rot = rotate_states(yv, th)[0]
    return float(th[0]), LocalState(rot[:3], rot[3:]), float(np.sqrt(d2[0]))


def nearest_state(z, db: MaterialDatabase) -> tuple[int, float]:
    """Index and distance of the database entry closest to `z`."""
    idx, d2 = db.query(_as_state_array(z))
    return int(idx[0]), float(np.sqrt(d2[0]))


def build_index(states, metric: Metric) -> MaterialDatabase:
    """Index a list/array of states for nearest-neighbor queries.

    Accepts an (N, 6) Mandel array or a sequence of LocalState.
    """
    return MaterialDatabase(_as_state_array(states), metric)


# -- CSV codec ---------------------------------------------------------------

_DB_HEADER = "eps_xx,eps_yy,eps_xy,sig_xx,sig_yy,sig_xy"


def save_database_csv(path, db_or_states, comments: list[str] | None = None) -> None:
    """Write a database as CSV in tensor components, 17 significant digits.

    Optional `comments` lines are emitted as leading '#' lines (provenance).
    """
    if isinstance(db_or_states, MaterialDatabase):
        rows = db_or_states.tensor_rows
    else:
        states = _as_state_array(db_or_states)
        rows = np.empty_like(states)
        rows[:, :3] = mandel_to_tensor(states[:, :3])
        rows[:, 3:] = mandel_to_tensor(states[:, 3:])
    with open(path, "w", newline="\n") as f:
        for line in comments or []:
            f.write(f"# {line}\n")
        f.write(_DB_HEADER + "\n")
        for r in rows:
            f.write(",".join(f"{v:.17g}" for v in r) + "\n")


def load_database_csv(path, metric: Metric | None = None, return_comments: bool = False):
    """Read a database CSV.  Returns a MaterialDatabase when a metric is given,
    otherwise the raw (N, 6) Mandel state array.  With `return_comments` the
    leading '#' provenance lines come back too (for lossless rewrites)."""
    comments = []
    lines = []
    with open(path) as f:
        for ln in f:
            if not ln.strip():
                continue
            if ln.startswith("#"):
                comments.append(ln[1:].strip())
            else:
                lines.append(ln)
    if not lines or lines[0].strip() != _DB_HEADER:
        raise ValueError(f"{path}: expected header '{_DB_HEADER}'")
    raw = np.array(
        [[float(v) for v in ln.strip().split(",")] for ln in lines[1:]], dtype=float
    )
    if raw.size == 0:
        raise ValueError(f"{path}: no data rows")
    states = np.empty_like(raw)
    states[:, :3] = tensor_to_mandel(raw[:, :3])
    states[:, 3:] = tensor_to_mandel(raw[:, 3:])
    out = MaterialDatabase(states, metric, tensor_rows=raw) if metric is not None else states
    return (out, comments) if return_comments else out
