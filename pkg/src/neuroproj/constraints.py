"""Analytic 2-D constraints.

Each constraint offers two views of the same geometry:

* batched residuals and dense Jacobians over positions shaped (B, m, 2), used
  by the analytic projection adapter, the Newton polish in the simulator and
  the evaluation metrics;
* an in-place Gauss-Seidel projection over a list of ``[x, y]`` points, the
  inner loop of the classical position-based simulator.

Inequality constraints report a signed distance (>= 0 when satisfied).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["Distance", "Bend", "CircleBoundary", "PolygonCollision", "wrap_angle"]

_TINY = 1e-12


def wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def _wrap_scalar(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class Distance:
    i: int
    j: int
    rest: float
    family: str = "shape"
    inequality = False
    soft = False

    def __post_init__(self):
        if not self.rest > 0:
            raise ValueError("rest length must be positive")

    @property
    def particles(self) -> tuple[int, ...]:
        return (self.i, self.j)

    def residuals(self, P: np.ndarray) -> np.ndarray:
        d = P[:, self.j] - P[:, self.i]
        return (np.linalg.norm(d, axis=-1) - self.rest)[:, None]

    def jacobian(self, P: np.ndarray) -> np.ndarray:
        B, m, _ = P.shape
        d = P[:, self.j] - P[:, self.i]
        L = np.linalg.norm(d, axis=-1, keepdims=True)
        n = np.divide(d, L, out=np.zeros_like(d), where=L > _TINY)
        J = np.zeros((B, 1, m, 2))
        J[:, 0, self.i] = -n
        J[:, 0, self.j] = n
        return J

    def project(self, pts: list, w, stiffness: float = 1.0) -> None:
        a, b = pts[self.i], pts[self.j]
        wi, wj = w[self.i], w[self.j]
        ws = wi + wj
        if ws == 0.0:
            return
        dx, dy = b[0] - a[0], b[1] - a[1]
        L = math.hypot(dx, dy)
        if L < _TINY:
            return
        s = stiffness * (L - self.rest) / (ws * L)
        a[0] += wi * s * dx
        a[1] += wi * s * dy
        b[0] -= wj * s * dx
        b[1] -= wj * s * dy


@dataclass(frozen=True)
class Bend:
    """Signed turning angle at ``j`` between segments (i, j) and (j, k)."""

    i: int
    j: int
    k: int
    rest_angle: float = 0.0
    stiffness: float = 0.1
    family: str = "bend"
    inequality = False

    @property
    def soft(self) -> bool:
        return self.stiffness < 1.0

    @property
    def particles(self) -> tuple[int, ...]:
        return (self.i, self.j, self.k)

    def angle(self, P: np.ndarray) -> np.ndarray:
        a = P[:, self.j] - P[:, self.i]
        b = P[:, self.k] - P[:, self.j]
        cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        dot = (a * b).sum(-1)
        return np.arctan2(cross, dot)

    def residuals(self, P: np.ndarray) -> np.ndarray:
        return wrap_angle(self.angle(P) - self.rest_angle)[:, None]

    def jacobian(self, P: np.ndarray) -> np.ndarray:
        B, m, _ = P.shape
        a = P[:, self.j] - P[:, self.i]
        b = P[:, self.k] - P[:, self.j]
        la = np.maximum((a * a).sum(-1, keepdims=True), _TINY)
        lb = np.maximum((b * b).sum(-1, keepdims=True), _TINY)
        da = np.stack([a[:, 1], -a[:, 0]], -1) / la
        db = np.stack([-b[:, 1], b[:, 0]], -1) / lb
        J = np.zeros((B, 1, m, 2))
        J[:, 0, self.i] -= da
        J[:, 0, self.j] += da - db
        J[:, 0, self.k] += db
        return J

    def project(self, pts: list, w, stiffness: float | None = None) -> None:
        k_ = self.stiffness if stiffness is None else stiffness
        pi, pj, pk = pts[self.i], pts[self.j], pts[self.k]
        ax, ay = pj[0] - pi[0], pj[1] - pi[1]
        bx, by = pk[0] - pj[0], pk[1] - pj[1]
        la = ax * ax + ay * ay
        lb = bx * bx + by * by
        if la < _TINY or lb < _TINY:
            return
        C = _wrap_scalar(math.atan2(ax * by - ay * bx, ax * bx + ay * by) - self.rest_angle)
        dax, day = ay / la, -ax / la
        dbx, dby = -by / lb, bx / lb
        gi = (-dax, -day)
        gj = (dax - dbx, day - dby)
        gk = (dbx, dby)
        wi, wj, wk = w[self.i], w[self.j], w[self.k]
        denom = wi * (gi[0] ** 2 + gi[1] ** 2) + wj * (gj[0] ** 2 + gj[1] ** 2) + wk * (gk[0] ** 2 + gk[1] ** 2)
        if denom < _TINY:
            return
        s = k_ * C / denom
        pi[0] -= wi * s * gi[0]
        pi[1] -= wi * s * gi[1]
        pj[0] -= wj * s * gj[0]
        pj[1] -= wj * s * gj[1]
        pk[0] -= wk * s * gk[0]
        pk[1] -= wk * s * gk[1]


@dataclass(frozen=True)
class CircleBoundary:
    """Keeps ``particles`` inside (or outside) a circle."""

    center: tuple[float, float]
    radius: float
    particles: tuple[int, ...]
    inside: bool = True
    family: str = "collision"
    inequality = True
    soft = False

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    def signed_distance(self, Q: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(Q - np.asarray(self.center), axis=-1)
        return self.radius - r if self.inside else r - self.radius

    def residuals(self, P: np.ndarray) -> np.ndarray:
        return self.signed_distance(P[:, list(self.particles)])

    def jacobian(self, P: np.ndarray) -> np.ndarray:
        B, m, _ = P.shape
        idx = list(self.particles)
        d = P[:, idx] - np.asarray(self.center)
        r = np.linalg.norm(d, axis=-1, keepdims=True)
        n = np.divide(d, r, out=np.zeros_like(d), where=r > _TINY)
        if self.inside:
            n = -n
        J = np.zeros((B, len(idx), m, 2))
        J[:, np.arange(len(idx)), idx] = n
        return J

    def project(self, pts: list, w, stiffness: float = 1.0) -> None:
        cx, cy = self.center
        R = self.radius
        for p in self.particles:
            if w[p] == 0.0:
                continue
            q = pts[p]
            dx, dy = q[0] - cx, q[1] - cy
            r = math.hypot(dx, dy)
            if r < _TINY:
                continue
            sd = R - r if self.inside else r - R
            if sd < 0.0:
                q[0] = cx + dx * R / r
                q[1] = cy + dy * R / r


def _hull_edges(P: np.ndarray, hull: tuple[int, ...]):
    """Edge start points, directions and outward normals of a CCW hull; P is (B, m, 2)."""
    H = P[:, list(hull)]
    E0 = H
    E1 = np.roll(H, -1, axis=1)
    D = E1 - E0
    L = np.linalg.norm(D, axis=-1, keepdims=True)
    T = D / np.maximum(L, _TINY)
    N = np.stack([T[..., 1], -T[..., 0]], -1)
    return E0, E1, N


@dataclass(frozen=True)
class PolygonCollision:
    """Non-penetration between two convex bodies given by CCW hull particle indices."""

    body_a: tuple[int, ...]
    hull_a: tuple[int, ...]
    body_b: tuple[int, ...]
    hull_b: tuple[int, ...]
    family: str = "collision"
    inequality = True
    soft = False

    @property
    def particles(self) -> tuple[int, ...]:
        return tuple(self.body_a) + tuple(self.body_b)

    def _pairs(self):
        return ((self.body_a, self.hull_b), (self.body_b, self.hull_a))

    def _penetration(self, P: np.ndarray, verts, hull):
        """Signed distance of each vertex to the hull, nearest edge, and edge parameter."""
        E0, E1, N = _hull_edges(P, hull)
        V = P[:, list(verts)]
        sd = np.einsum("bved,bed->bve", V[:, :, None, :] - E0[:, None], N)
        e = np.argmax(sd, axis=-1)
        depth = np.take_along_axis(sd, e[..., None], -1)[..., 0]
        D = E1 - E0
        De = np.take_along_axis(D, e[..., None].repeat(2, -1), 1)
        E0e = np.take_along_axis(E0, e[..., None].repeat(2, -1), 1)
        t = ((V - E0e) * De).sum(-1) / np.maximum((De * De).sum(-1), _TINY)
        return depth, e, np.clip(t, 0.0, 1.0), N

    def residuals(self, P: np.ndarray) -> np.ndarray:
        out = [self._penetration(P, v, h)[0] for v, h in self._pairs()]
        return np.concatenate(out, axis=1)

    def jacobian(self, P: np.ndarray) -> np.ndarray:
        B, m, _ = P.shape
        blocks = []
        for verts, hull in self._pairs():
            _, e, t, N = self._penetration(P, verts, hull)
            J = np.zeros((B, len(verts), m, 2))
            hull = np.asarray(hull)
            for b in range(B):
                for k, v in enumerate(verts):
                    ek = e[b, k]
                    n = N[b, ek]
                    J[b, k, v] += n
                    J[b, k, hull[ek]] -= (1.0 - t[b, k]) * n
                    J[b, k, hull[(ek + 1) % len(hull)]] -= t[b, k] * n
            blocks.append(J)
        return np.concatenate(blocks, axis=1)

    def project(self, pts: list, w, stiffness: float = 1.0) -> None:
        for verts, hull in self._pairs():
            nh = len(hull)
            for v in verts:
                q = pts[v]
                best, best_e = -math.inf, -1
                for e in range(nh):
                    a, b = pts[hull[e]], pts[hull[(e + 1) % nh]]
                    ex, ey = b[0] - a[0], b[1] - a[1]
                    le = math.hypot(ex, ey)
                    if le < _TINY:
                        continue
                    nx, ny = ey / le, -ex / le
                    sd = nx * (q[0] - a[0]) + ny * (q[1] - a[1])
                    if sd >= 0.0:
                        best_e = -1
                        break
                    if sd > best:
                        best, best_e = sd, e
                if best_e < 0:
                    continue
                a, b = pts[hull[best_e]], pts[hull[(best_e + 1) % nh]]
                ex, ey = b[0] - a[0], b[1] - a[1]
                le = math.hypot(ex, ey)
                nx, ny = ey / le, -ex / le
                t = ((q[0] - a[0]) * ex + (q[1] - a[1]) * ey) / (le * le)
                t = min(max(t, 0.0), 1.0)
                wv, wa, wb = w[v], w[hull[best_e]], w[hull[(best_e + 1) % nh]]
                denom = wv + wa * (1.0 - t) ** 2 + wb * t * t
                if denom < _TINY:
                    continue
                s = best / denom
                q[0] -= wv * s * nx
                q[1] -= wv * s * ny
                a[0] += wa * s * (1.0 - t) * nx
                a[1] += wa * s * (1.0 - t) * ny
                b[0] += wb * s * t * nx
                b[1] += wb * s * t * ny
