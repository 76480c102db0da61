"""
Robust geometric predicates.

``orient3d(a, b, c, d)`` is the sign of det[b - a, c - a, d - a] (positive for
the canonical simplex (0,0,0), (1,0,0), (0,1,0), (0,0,1)). ``in_sphere`` is
positive when ``e`` lies strictly inside the circumsphere of a positively
oriented (a, b, c, d). Both evaluate in floating point first and fall back to
exact integer arithmetic when the result is within the forward error bound.
Cospherical ties are broken by symbolic perturbation on a fixed point rank.
"""

import math
from typing import Optional, Sequence, Tuple

Point = Sequence[float]

_EPS = 2.0 ** -53
_O3D_BOUND = (7.0 + 56.0 * _EPS) * _EPS
_ISP_BOUND = (16.0 + 224.0 * _EPS) * _EPS


def _sign(x) -> int:
    return (x > 0) - (x < 0)


def _scaled_integers(*points: Point) -> list:
    """Exact integer images of the coordinates under one common power-of-two scale."""
    ratios = [tuple(float(c).as_integer_ratio() for c in p) for p in points]
    denom = max(d for r in ratios for _, d in r)
    return [tuple(n * (denom // d) for n, d in r) for r in ratios]


def _det3(ux, uy, uz, vx, vy, vz, wx, wy, wz):
    return ux * (vy * wz - vz * wy) - uy * (vx * wz - vz * wx) + uz * (vx * wy - vy * wx)


def orient3d_exact(a: Point, b: Point, c: Point, d: Point) -> int:
    a, b, c, d = _scaled_integers(a, b, c, d)
    return _sign(_det3(b[0] - a[0], b[1] - a[1], b[2] - a[2],
                       c[0] - a[0], c[1] - a[1], c[2] - a[2],
                       d[0] - a[0], d[1] - a[1], d[2] - a[2]))


def orient3d(a: Point, b: Point, c: Point, d: Point) -> int:
    bx, by, bz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    cx, cy, cz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    dx, dy, dz = d[0] - a[0], d[1] - a[1], d[2] - a[2]
    m1, m2 = cy * dz, cz * dy
    m3, m4 = cx * dz, cz * dx
    m5, m6 = cx * dy, cy * dx
    det = bx * (m1 - m2) - by * (m3 - m4) + bz * (m5 - m6)
    permanent = (abs(bx) * (abs(m1) + abs(m2)) + abs(by) * (abs(m3) + abs(m4))
                 + abs(bz) * (abs(m5) + abs(m6)))
    bound = _O3D_BOUND * permanent
    if det > bound or -det > bound:
        return 1 if det > 0 else -1
    if permanent == 0.0:
        return 0
    return orient3d_exact(a, b, c, d)


def _insphere_terms(a, b, c, d, e):
    """Determinant of the lifted points relative to ``e`` and its absolute permanent."""
    aex, aey, aez = a[0] - e[0], a[1] - e[1], a[2] - e[2]
    bex, bey, bez = b[0] - e[0], b[1] - e[1], b[2] - e[2]
    cex, cey, cez = c[0] - e[0], c[1] - e[1], c[2] - e[2]
    dex, dey, dez = d[0] - e[0], d[1] - e[1], d[2] - e[2]

    ab = aex * bey - bex * aey
    bc = bex * cey - cex * bey
    cd = cex * dey - dex * cey
    da = dex * aey - aex * dey
    ac = aex * cey - cex * aey
    bd = bex * dey - dex * bey

    abc = aez * bc - bez * ac + cez * ab
    bcd = bez * cd - cez * bd + dez * bc
    cda = cez * da + dez * ac + aez * cd
    dab = dez * ab + aez * bd + bez * da

    alift = aex * aex + aey * aey + aez * aez
    blift = bex * bex + bey * bey + bez * bez
    clift = cex * cex + cey * cey + cez * cez
    dlift = dex * dex + dey * dey + dez * dez

    det = (dlift * abc - clift * dab) + (blift * cda - alift * bcd)
    if isinstance(det, int):
        return det, 0

    p_ab = abs(aex * bey) + abs(bex * aey)
    p_bc = abs(bex * cey) + abs(cex * bey)
    p_cd = abs(cex * dey) + abs(dex * cey)
    p_da = abs(dex * aey) + abs(aex * dey)
    p_ac = abs(aex * cey) + abs(cex * aey)
    p_bd = abs(bex * dey) + abs(dex * bey)
    permanent = (
        (abs(bez) * p_cd + abs(cez) * p_bd + abs(dez) * p_bc) * alift
        + (abs(cez) * p_da + abs(dez) * p_ac + abs(aez) * p_cd) * blift
        + (abs(dez) * p_ab + abs(aez) * p_bd + abs(bez) * p_da) * clift
        + (abs(aez) * p_bc + abs(bez) * p_ac + abs(cez) * p_ab) * dlift
    )
    return det, permanent


def in_sphere_exact(a: Point, b: Point, c: Point, d: Point, e: Point) -> int:
    det, _ = _insphere_terms(*_scaled_integers(a, b, c, d, e))
    return -_sign(det)


def in_sphere(a: Point, b: Point, c: Point, d: Point, e: Point) -> int:
    """+1 inside, -1 outside, 0 on the circumsphere of positively oriented (a, b, c, d)."""
    det, permanent = _insphere_terms(a, b, c, d, e)
    bound = _ISP_BOUND * permanent
    if math.isfinite(det) and (det > bound or -det > bound):
        return -1 if det > 0 else 1
    return in_sphere_exact(a, b, c, d, e)


def orient2d_exact(a: Point, b: Point, c: Point) -> int:
    a, b, c = _scaled_integers(a, b, c)
    return _sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))


def coplanar_orientation(a: Point, b: Point, c: Point) -> int:
    """Orientation of three points within their common plane, coherent for any fixed plane."""
    for i, j in ((0, 1), (1, 2), (0, 2)):
        o = orient2d_exact((a[i], a[j]), (b[i], b[j]), (c[i], c[j]))
        if o:
            return o
    return 0


def in_circle_coplanar(a: Point, b: Point, c: Point, p: Point) -> int:
    """+1 if ``p`` (coplanar with a, b, c) is strictly inside their circumcircle."""
    a, b, c, p = _scaled_integers(a, b, c, p)
    u = (b[0] - a[0], b[1] - a[1], b[2] - a[2])
    v = (c[0] - a[0], c[1] - a[1], c[2] - a[2])
    n = (u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0])
    if n == (0, 0, 0):
        return 0
    # (a, b, c, a + n) is positively oriented; its circumsphere cuts the plane in the circumcircle
    q = (a[0] + n[0], a[1] + n[1], a[2] + n[2])
    det, _ = _insphere_terms(a, b, c, q, p)
    return -_sign(det)


def in_sphere_perturbed(a: Point, b: Point, c: Point, d: Point, e: Point, ranks: Tuple[int, int, int, int, int]) -> int:
    """Never returns 0: cospherical ties resolved by perturbing higher-ranked points more."""
    s = in_sphere(a, b, c, d, e)
    if s:
        return s
    pts = (a, b, c, d, e)
    for slot in sorted(range(5), key=lambda i: ranks[i], reverse=True)[:3]:
        if slot == 4:
            return -1
        q = list(pts[:4])
        q[slot] = e
        o = orient3d(*q)
        if o:
            return o
    return -1


def in_circle_perturbed(a: Point, b: Point, c: Point, p: Point, ranks: Tuple[int, int, int, int]) -> int:
    s = in_circle_coplanar(a, b, c, p)
    if s:
        return s
    local = coplanar_orientation(a, b, c)
    pts = (a, b, c, p)
    for slot in sorted(range(4), key=lambda i: ranks[i], reverse=True)[:3]:
        if slot == 3:
            return -1
        q = list(pts[:3])
        q[slot] = p
        o = coplanar_orientation(*q)
        if o:
            return o * local
    return -1


def circumcenter(a: Point, b: Point, c: Point, d: Point) -> Optional[Tuple[float, float, float]]:
    """Circumcenter in floating point, ``None`` for a flat tetrahedron."""
    bx, by, bz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    cx, cy, cz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    dx, dy, dz = d[0] - a[0], d[1] - a[1], d[2] - a[2]
    det = _det3(bx, by, bz, cx, cy, cz, dx, dy, dz)
    if det == 0.0:
        return None
    b2, c2, d2 = bx * bx + by * by + bz * bz, cx * cx + cy * cy + cz * cz, dx * dx + dy * dy + dz * dz
    # Cramer's rule on 2 [b; c; d] x = [|b|^2; |c|^2; |d|^2]
    x = _det3(b2, by, bz, c2, cy, cz, d2, dy, dz)
    y = _det3(bx, b2, bz, cx, c2, cz, dx, d2, dz)
    z = _det3(bx, by, b2, cx, cy, c2, dx, dy, d2)
    s = 0.5 / det
    return a[0] + x * s, a[1] + y * s, a[2] + z * s
