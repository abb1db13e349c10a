"""Essential-matrix solvers: Nister five-point minimal solver, an eight-point
fallback, decomposition into pose candidates, and midpoint triangulation.

All functions take points in normalized (intrinsics-removed) image
coordinates, as 2D arrays of shape (n, 2).
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateConfiguration

# Nister's column order for the 10x20 constraint matrix, as exponent triples
# of (x, y, z): x^3, y^3, x^2 y, x y^2, x^2 z, x^2, y^2 z, y^2, xyz, xy |
# x z^2, x z, x, y z^2, y z, y, z^3, z^2, z, 1.
_MONOMIALS = [
    (3, 0, 0), (0, 3, 0), (2, 1, 0), (1, 2, 0), (2, 0, 1),
    (2, 0, 0), (0, 2, 1), (0, 2, 0), (1, 1, 1), (1, 1, 0),
    (1, 0, 2), (1, 0, 1), (1, 0, 0), (0, 1, 2), (0, 1, 1),
    (0, 1, 0), (0, 0, 3), (0, 0, 2), (0, 0, 1), (0, 0, 0),
]
_MONOMIAL_INDEX = {m: k for k, m in enumerate(_MONOMIALS)}


def _p_add(a, b):
    out = dict(a)
    for m, c in b.items():
        out[m] = out.get(m, 0.0) + c
    return out


def _p_sub(a, b):
    out = dict(a)
    for m, c in b.items():
        out[m] = out.get(m, 0.0) - c
    return out


def _p_mul(a, b):
    out = {}
    for ma, ca in a.items():
        for mb, cb in b.items():
            m = (ma[0] + mb[0], ma[1] + mb[1], ma[2] + mb[2])
            out[m] = out.get(m, 0.0) + ca * cb
    return out


def _p_scale(a, s):
    return {m: c * s for m, c in a.items()}


def _to_row(poly):
    row = np.zeros(20)
    for m, c in poly.items():
        row[_MONOMIAL_INDEX[m]] = c
    return row


def _entry_polys(basis):
    """E(x,y,z) = x X + y Y + z Z + W as 3x3 of degree-1 polynomials."""
    mats = [b.reshape(3, 3) for b in basis]
    vars_ = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
    entries = [[None] * 3 for _ in range(3)]
    for a in range(3):
        for b in range(3):
            entries[a][b] = {v: mats[k][a, b] for k, v in enumerate(vars_)}
    return entries


def _constraint_matrix(basis):
    """The 10x20 matrix of det(E)=0 and 2 E E^T E - tr(E E^T) E = 0."""
    e = _entry_polys(basis)

    def det3(m):
        c0 = _p_sub(_p_mul(m[1][1], m[2][2]), _p_mul(m[1][2], m[2][1]))
        c1 = _p_sub(_p_mul(m[1][0], m[2][2]), _p_mul(m[1][2], m[2][0]))
        c2 = _p_sub(_p_mul(m[1][0], m[2][1]), _p_mul(m[1][1], m[2][0]))
        return _p_add(_p_sub(_p_mul(m[0][0], c0), _p_mul(m[0][1], c1)), _p_mul(m[0][2], c2))

    # EE^T and the traceless combination A = EE^T - tr(EE^T)/2 * I
    eet = [[None] * 3 for _ in range(3)]
    for a in range(3):
        for c in range(3):
            acc = {}
            for b in range(3):
                acc = _p_add(acc, _p_mul(e[a][b], e[c][b]))
            eet[a][c] = acc
    trace = _p_add(_p_add(eet[0][0], eet[1][1]), eet[2][2])
    amat = [[_p_sub(eet[a][c], _p_scale(trace, 0.5)) if a == c else eet[a][c] for c in range(3)] for a in range(3)]

    rows = [det3(e)]
    for a in range(3):
        for b in range(3):
            acc = {}
            for c in range(3):
                acc = _p_add(acc, _p_mul(amat[a][c], e[c][b]))
            rows.append(acc)
    return np.array([_to_row(p) for p in rows])


def _poly_of_row(row):
    return {m: row[k] for k, m in enumerate(_MONOMIALS) if row[k] != 0.0}


def _z_coeffs(poly, var, max_deg):
    """Coefficients (ascending in z) of the x-, y-, or constant part of `poly`.

    var: 0 for terms linear in x, 1 for linear in y, None for pure-z terms.
    """
    out = np.zeros(max_deg + 1)
    for (ex, ey, ez), c in poly.items():
        if var == 0 and (ex, ey) == (1, 0):
            out[ez] += c
        elif var == 1 and (ex, ey) == (0, 1):
            out[ez] += c
        elif var is None and (ex, ey) == (0, 0):
            out[ez] += c
    return out


def _polydet3(b):
    """Determinant of a 3x3 matrix of z-polynomials (ascending coeff arrays)."""
    def mul(p, q):
        return np.convolve(p, q)

    def add(p, q, sign=1.0):
        n = max(len(p), len(q))
        out = np.zeros(n)
        out[: len(p)] += p
        out[: len(q)] += sign * q
        return out

    c0 = add(mul(b[1][1], b[2][2]), mul(b[1][2], b[2][1]), -1.0)
    c1 = add(mul(b[1][0], b[2][2]), mul(b[1][2], b[2][0]), -1.0)
    c2 = add(mul(b[1][0], b[2][1]), mul(b[1][1], b[2][0]), -1.0)
    return add(add(mul(b[0][0], c0), mul(b[0][1], c1), -1.0), mul(b[0][2], c2))


def _design_matrix(src, dst):
    """5x9 (or nx9) epipolar design matrix for dst^T E src = 0, E row-major."""
    src_h = np.column_stack([src, np.ones(len(src))])
    dst_h = np.column_stack([dst, np.ones(len(dst))])
    return np.einsum("na,nb->nab", dst_h, src_h).reshape(len(src), 9)


def _epipolar_residuals(e_mat, src, dst):
    src_h = np.column_stack([src, np.ones(len(src))])
    dst_h = np.column_stack([dst, np.ones(len(dst))])
    return np.einsum("na,ab,nb->n", dst_h, e_mat, src_h)


def _cross_mat(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def _polish_essential(e_mat, src, dst):
    """Newton-polish E on the essential manifold against the epipolar equations.

    The polynomial solve leaves ~1e-8 off-manifold error in ill-conditioned
    samples; re-solving the 5-equation / 5-unknown system in a (rotation,
    unit-translation) chart recovers full float64 accuracy. Returns the input
    unchanged if the decomposition or the linear solve degenerates.
    """
    u, _, vt = np.linalg.svd(e_mat)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    rot = u @ w @ vt
    t = u[:, 2].copy()
    src_h = np.column_stack([src, np.ones(len(src))])
    dst_h = np.column_stack([dst, np.ones(len(dst))])
    for _ in range(4):
        # tangent basis at t on the unit sphere
        anchor = np.zeros(3)
        anchor[int(np.argmin(np.abs(t)))] = 1.0
        b1 = np.cross(t, anchor)
        b1 /= np.linalg.norm(b1)
        b2 = np.cross(t, b1)
        tx = _cross_mat(t)
        e_cur = tx @ rot
        res = np.einsum("na,ab,nb->n", dst_h, e_cur, src_h)
        cols = [tx @ rot @ _cross_mat(basis_vec)
                for basis_vec in np.eye(3)]
        cols += [_cross_mat(b) @ rot for b in (b1, b2)]
        jac = np.column_stack([
            np.einsum("na,ab,nb->n", dst_h, c, src_h) for c in cols
        ])
        try:
            delta = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            return e_mat
        if not np.all(np.isfinite(delta)) or np.linalg.norm(delta) > 0.1:
            return e_mat
        angle = np.linalg.norm(delta[:3])
        if angle > 0:
            axis = delta[:3] / angle
            k = _cross_mat(axis)
            rot = rot @ (np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k)
        t = t + delta[3] * b1 + delta[4] * b2
        t /= np.linalg.norm(t)
        if np.linalg.norm(delta) < 1e-14:
            break
    polished = _cross_mat(t) @ rot
    polished /= np.linalg.norm(polished)
    if np.max(np.abs(_epipolar_residuals(polished, src, dst))) <= max(
            1e-12, np.max(np.abs(_epipolar_residuals(e_mat, src, dst)))):
        return polished
    return e_mat


def estimate_essential_fivepoint(src, dst):
    """All essential-matrix solutions of the five-point minimal problem.

    Args:
        src, dst: (5, 2) normalized image points.

    Returns:
        List of 3x3 essential matrices (unit Frobenius norm), each satisfying
        the five epipolar constraints to high accuracy.

    Raises:
        DegenerateConfiguration: design-matrix nullspace dimension exceeds 4.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != 5 or len(dst) != 5:
        raise ValueError("the minimal solver needs exactly 5 correspondences")
    q = _design_matrix(src, dst)
    _, svals, vt = np.linalg.svd(q)
    tol = max(q.shape) * np.finfo(np.float64).eps * svals[0] if svals[0] > 0 else 0.0
    rank = int(np.count_nonzero(svals > max(tol, 1e-12)))
    if rank < 5:
        raise DegenerateConfiguration(f"design matrix rank {rank} < 5 (nullspace > 4)")
    basis = vt[5:9]  # X, Y, Z, W

    a = _constraint_matrix(basis)
    # Gauss-Jordan with partial pivoting over the first 10 columns.
    a = a.copy()
    for col in range(10):
        pivot = col + int(np.argmax(np.abs(a[col:, col])))
        if np.abs(a[pivot, col]) < 1e-14:
            raise DegenerateConfiguration("constraint matrix is rank-deficient")
        a[[col, pivot]] = a[[pivot, col]]
        a[col] /= a[col, col]
        for row in range(10):
            if row != col:
                a[row] -= a[row, col] * a[col]

    z_poly = {(0, 0, 1): 1.0}
    b_mat = [[None] * 3 for _ in range(3)]
    for out_row, (ra, rb) in enumerate([(4, 5), (6, 7), (8, 9)]):
        diff = _p_sub(_poly_of_row(a[ra]), _p_mul(z_poly, _poly_of_row(a[rb])))
        b_mat[out_row][0] = _z_coeffs(diff, 0, 3)
        b_mat[out_row][1] = _z_coeffs(diff, 1, 3)
        b_mat[out_row][2] = _z_coeffs(diff, None, 4)

    det = _polydet3(b_mat)  # degree 10, ascending
    det_deriv = np.polynomial.polynomial.polyder(det)
    roots = np.polynomial.polynomial.polyroots(det)
    solutions = []
    for root in roots:
        if abs(root.imag) > 1e-8 * (1.0 + abs(root.real)):
            continue
        z = float(root.real)
        # polish with a few Newton steps: the companion-matrix eigenvalues
        # carry ~1e-8 relative error, which the decomposed pose inherits
        for _ in range(3):
            slope = np.polynomial.polynomial.polyval(z, det_deriv)
            if abs(slope) < 1e-300:
                break
            step = np.polynomial.polynomial.polyval(z, det) / slope
            z -= step
            if abs(step) < 1e-15 * (1.0 + abs(z)):
                break
        bz = np.array([[np.polynomial.polynomial.polyval(z, b_mat[r][c]) for c in range(3)] for r in range(3)])
        _, _, vtb = np.linalg.svd(bz)
        null = vtb[-1]
        if abs(null[2]) < 1e-12:
            continue
        x, y = null[0] / null[2], null[1] / null[2]
        e_mat = (x * basis[0] + y * basis[1] + z * basis[2] + basis[3]).reshape(3, 3)
        norm = np.linalg.norm(e_mat)
        if norm < 1e-12:
            continue
        e_mat = _polish_essential(e_mat / norm, src, dst)
        if np.max(np.abs(_epipolar_residuals(e_mat, src, dst))) < 1e-8:
            solutions.append(e_mat)
    return solutions


def estimate_essential_eightpoint(src, dst):
    """Normalized eight-point solve (>= 8 correspondences), rank-2 projected."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) < 8:
        raise ValueError("the eight-point solver needs at least 8 correspondences")
    q = _design_matrix(src, dst)
    _, svals, vt = np.linalg.svd(q)
    if np.count_nonzero(svals > 1e-12 * max(svals[0], 1.0)) < 8:
        raise DegenerateConfiguration("design matrix rank below 8")
    e_mat = vt[-1].reshape(3, 3)
    u, s, vte = np.linalg.svd(e_mat)
    sigma = (s[0] + s[1]) / 2.0
    e_mat = u @ np.diag([sigma, sigma, 0.0]) @ vte
    norm = np.linalg.norm(e_mat)
    if norm < 1e-12:
        raise DegenerateConfiguration("essential matrix collapsed to zero")
    return [e_mat / norm]


def decompose_essential(e_mat):
    """The four (R, t_hat) candidates of an essential matrix.

    Convention: X_dst = R @ X_src + t, with unit-norm t.
    """
    u, _, vt = np.linalg.svd(e_mat)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1, r2 = u @ w @ vt, u @ w.T @ vt
    t = u[:, 2]
    t = t / np.linalg.norm(t)
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


def triangulate_midpoint(rotation, translation, src, dst):
    """Midpoint triangulation for the relative pose X_dst = R X_src + t.

    Returns (points_src (n,3), depth_src (n,), depth_dst (n,)): the midpoint
    in source-camera coordinates and the z-depths in both cameras.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    d1 = np.column_stack([src, np.ones(n)])
    d1 /= np.linalg.norm(d1, axis=1, keepdims=True)
    d2_cam = np.column_stack([dst, np.ones(n)])
    d2_cam /= np.linalg.norm(d2_cam, axis=1, keepdims=True)
    # express ray 2 in source coordinates: origin c2 = -R^T t, direction R^T d2
    c2 = -rotation.T @ translation
    d2 = d2_cam @ rotation  # row-wise R^T d2
    # closest points on the two skew lines
    b_dot = np.einsum("ni,ni->n", d1, d2)
    denom = 1.0 - b_dot**2
    denom = np.where(np.abs(denom) < 1e-12, np.nan, denom)
    rhs1 = d1 @ c2
    rhs2 = d2 @ c2
    t1 = (rhs1 - b_dot * rhs2) / denom
    t2 = (b_dot * rhs1 - rhs2) / denom
    p1 = d1 * t1[:, None]
    p2 = c2 + d2 * t2[:, None]
    mid = 0.5 * (p1 + p2)
    depth_src = mid[:, 2]
    mid_dst = mid @ rotation.T + translation
    return mid, depth_src, mid_dst[:, 2]


def select_pose_by_cheirality(e_mat, src, dst):
    """Pick the decomposition candidate with the most points in front of both cameras.

    Returns (rotation, translation, positive_mask) or None when every
    candidate leaves all points behind a camera.
    """
    best = None
    for rotation, translation in decompose_essential(e_mat):
        _, z1, z2 = triangulate_midpoint(rotation, translation, src, dst)
        positive = np.isfinite(z1) & np.isfinite(z2) & (z1 > 0) & (z2 > 0)
        count = int(np.count_nonzero(positive))
        if best is None or count > best[3]:
            best = (rotation, translation, positive, count)
    if best is None or best[3] == 0:
        return None
    return best[0], best[1], best[2]
