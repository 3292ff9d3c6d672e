"""Compiled inner loops.

Everything here takes plain float64/int64 arrays and scalars so the same
source runs under ``numba.njit`` or as ordinary numpy code (see ``_accel``).
The public, object-level API lives in ``ball``, ``sets`` and ``solver``.
"""
import numpy as np

from ._accel import jit

# feasibility-step cases
CASE_FEASIBLE = 0
CASE_NONEMPTY = 1
CASE_EMPTY = 2
CASE_DEGENERATE = -1

# simple-set kinds
SET_WHOLE = 0
SET_ORTHANT = 1
SET_BOX = 2
SET_HYPERPLANE = 3

# stepsize kinds
SCHED_SQRTLOG = 0
SCHED_INVSQRT = 1
SCHED_STRONG = 2
SCHED_CONSTANT = 3

# averaging kinds
AVG_NONE = 0
AVG_CONVEX = 1
AVG_STRONG = 2

# stop codes
STOP_NONE = 0
STOP_FEAS_OPT = 1
STOP_MOVEMENT = 2
STOP_DEGENERATE = -1

_BOUND_RTOL = 1e-10


@jit
def ball_step(v, h, g, lipschitz, beta):
    """Return ``(z, case, radius_sq)`` for one feasibility step at ``v``.

    The nonempty-ball coefficient uses the cancellation-free identity
    ``(1/L)(1 - sqrt(R)/|v-c|) = 2h / (L |g| (|g| + L sqrt(R)))``.
    """
    gn2 = np.dot(g, g)
    radius_sq = gn2 / (lipschitz * lipschitz) - 2.0 * h / lipschitz
    if h <= 0.0:
        return v.copy(), CASE_FEASIBLE, radius_sq
    if gn2 == 0.0:
        return v.copy(), CASE_DEGENERATE, radius_sq
    if radius_sq > 0.0:
        gn = np.sqrt(gn2)
        coef = 2.0 * beta * h / (gn * (gn + lipschitz * np.sqrt(radius_sq)))
        return v - coef * g, CASE_NONEMPTY, radius_sq
    return v - (beta / lipschitz) * g, CASE_EMPTY, radius_sq


@jit
def _hyperplane_residual(theta, a, y, ub):
    s = 0.0
    for j in range(a.shape[0]):
        t = a[j] - y[j] * theta
        if t < 0.0:
            t = 0.0
        elif t > ub:
            t = ub
        s += y[j] * t
    return s


@jit
def project_hyperplane_box(a, y, ub):
    """Euclidean projection onto ``{0 <= x <= ub, y.x = 0}`` with ``y`` in {-1, +1}.

    ``x(theta) = clip(a - y*theta, 0, ub)`` and ``y.x(theta)`` is piecewise linear
    and nonincreasing in ``theta``; the root is bracketed between sorted
    breakpoints and then solved exactly on the linear piece.
    """
    n = a.shape[0]
    npos = 0
    for j in range(n):
        if y[j] > 0:
            npos += 1
    if npos == 0 or npos == n:
        return np.zeros(n)
    if np.isinf(ub):
        bps = np.sort(y * a)
    else:
        bps = np.sort(np.concatenate((y * a, y * (a - ub))))
    lo = 0
    hi = bps.shape[0] - 1
    g_lo = _hyperplane_residual(bps[lo], a, y, ub)
    g_hi = _hyperplane_residual(bps[hi], a, y, ub)
    if g_lo <= 0.0:
        theta = bps[lo]
    elif g_hi >= 0.0:
        theta = bps[hi]
    else:
        while hi - lo > 1:
            mid = (lo + hi) // 2
            g_mid = _hyperplane_residual(bps[mid], a, y, ub)
            if g_mid >= 0.0:
                lo = mid
                g_lo = g_mid
            else:
                hi = mid
                g_hi = g_mid
        theta = bps[lo] + g_lo * (bps[hi] - bps[lo]) / (g_lo - g_hi)
    out = a - y * theta
    for j in range(n):
        if out[j] < 0.0:
            out[j] = 0.0
        elif out[j] > ub:
            out[j] = ub
    return out


@jit
def project_set(x, kind, lo, hi, labels, ub, nhead):
    if kind == SET_ORTHANT:
        return np.maximum(x, 0.0)
    if kind == SET_BOX:
        return np.minimum(np.maximum(x, lo), hi)
    if kind == SET_HYPERPLANE:
        out = x.copy()
        out[:nhead] = project_hyperplane_box(x[:nhead], labels, ub)
        return out
    return x.copy()


@jit
def step_size(k, kind, a):
    if kind == SCHED_SQRTLOG:
        return a / (np.sqrt(k + 2.0) * np.log(k + 2.0))
    if kind == SCHED_INVSQRT:
        return a / np.sqrt(k + 1.0)
    if kind == SCHED_STRONG:
        return 2.0 / (a * (k + 1.0))
    return a


@jit
def eval_constraint(Qs, qs, bs, i, y):
    Qy = np.dot(Qs[i], y)
    h = 0.5 * np.dot(y, Qy) + np.dot(qs[i], y) - bs[i]
    return h, Qy + qs[i]


@jit
def refresh_anchor(Qs, qs, bs, i, y, anc, anc_g, anc_h, anc_s):
    """Evaluate constraint ``i`` at ``y`` exactly and make ``y`` its anchor."""
    Qy = np.dot(Qs[i], y)
    quad = 0.5 * np.dot(y, Qy)
    lin = np.dot(qs[i], y)
    h = quad + lin - bs[i]
    g = Qy + qs[i]
    anc[i, :] = y
    anc_g[i, :] = g
    anc_h[i] = h
    anc_s[i] = abs(quad) + abs(lin) + abs(bs[i])
    return h, g


@jit
def init_anchors(Qs, qs, bs, y, anc, anc_g, anc_h, anc_s):
    for i in range(Qs.shape[0]):
        refresh_anchor(Qs, qs, bs, i, y, anc, anc_g, anc_h, anc_s)


@jit
def constraint_bounds(y, anc, anc_g, anc_h, anc_s, Ls):
    """Certified brackets ``lo <= h_i(y) <= hi`` from each constraint's anchor.

    Convexity gives the lower bound, the Lipschitz gradient the upper bound;
    ``slack`` absorbs floating-point error in both.
    """
    d = y - anc
    lin = np.sum(d * anc_g, axis=1)
    quad = 0.5 * Ls * np.sum(d * d, axis=1)
    lo = anc_h + lin
    hi = lo + quad
    slack = _BOUND_RTOL * (anc_s + np.abs(anc_h) + np.abs(lin) + quad) + 1e-300
    return lo, hi, slack


@jit
def most_violated(Qs, qs, bs, Ls, y, anc, anc_g, anc_h, anc_s):
    """Exact ``argmax_i h_i(y)`` (lowest index on ties) using anchor brackets."""
    m = Qs.shape[0]
    lo, hi, slack = constraint_bounds(y, anc, anc_g, anc_h, anc_s, Ls)
    floor = -np.inf
    for i in range(m):
        if lo[i] - slack[i] > floor:
            floor = lo[i] - slack[i]
    best = -1
    best_h = -np.inf
    for i in range(m):
        if hi[i] + slack[i] >= floor:
            h, _ = refresh_anchor(Qs, qs, bs, i, y, anc, anc_g, anc_h, anc_s)
            if h > best_h:
                best_h = h
                best = i
    return best, best_h


@jit
def feasibility_sq(Qs, qs, bs, Ls, y, anc, anc_g, anc_h, anc_s):
    """``sum_i max(0, h_i(y))**2``; constraints certified inactive are skipped."""
    lo, hi, slack = constraint_bounds(y, anc, anc_g, anc_h, anc_s, Ls)
    total = 0.0
    for i in range(Qs.shape[0]):
        if hi[i] + slack[i] > 0.0:
            h, _ = refresh_anchor(Qs, qs, bs, i, y, anc, anc_g, anc_h, anc_s)
            if h > 0.0:
                total += h * h
    return total


@jit
def run_chunk(x, qfx, k0, n_steps, idx, greedy,
              Qf, qf, Qs, qs, bs, Ls, beta,
              sched_kind, sched_a,
              set_kind, set_lo, set_hi, set_labels, set_ub, set_nhead,
              avg_kind, avg_sum, avg_w,
              anc, anc_g, anc_h, anc_s,
              stop_opt, fstar, opt_tol, feas_tol,
              stop_move, ring, ring_state, move_tol,
              record_feas, rec_f, rec_feas, rec_step, rec_case, rec_idx):
    """Advance ``n_steps`` iterations in place; return ``(done, stop_code, bad_index)``.

    ``x``, ``qfx`` (= Qf @ x), the averaging accumulators, the anchor cache and
    the movement ring buffer are all updated in place so consecutive chunks
    continue one run. ``greedy`` switches from the sampled index ``idx[s]`` to
    the most violated constraint.
    """
    m = Qs.shape[0]
    M = ring.shape[0]
    for s in range(n_steps):
        k = k0 + s
        alpha = step_size(k, sched_kind, sched_a)
        if avg_kind == AVG_CONVEX:
            avg_sum += alpha * x
            avg_w[0] += alpha
        elif avg_kind == AVG_STRONG:
            w = (k + 1.0) * (k + 1.0)
            avg_sum += w * x
            avg_w[0] += w

        v = project_set(x - alpha * (qfx + qf), set_kind, set_lo, set_hi,
                        set_labels, set_ub, set_nhead)
        i = -1
        case = CASE_FEASIBLE
        z = v
        if m > 0:
            if greedy:
                i, hv = most_violated(Qs, qs, bs, Ls, v, anc, anc_g, anc_h, anc_s)
                if hv > 0.0:
                    gv = anc_g[i].copy()
                    z, case, _ = ball_step(v, hv, gv, Ls[i], beta)
            else:
                i = idx[s]
                hv, gv = refresh_anchor(Qs, qs, bs, i, v, anc, anc_g, anc_h, anc_s)
                z, case, _ = ball_step(v, hv, gv, Ls[i], beta)
            if case == CASE_DEGENERATE:
                return s, STOP_DEGENERATE, i

        xn = project_set(z, set_kind, set_lo, set_hi, set_labels, set_ub, set_nhead)
        dx = xn - x
        step_sq = np.dot(dx, dx)
        x[:] = xn
        qfx[:] = np.dot(Qf, x)
        f = 0.5 * np.dot(x, qfx) + np.dot(qf, x)
        feas = np.nan
        if record_feas:
            feas = feasibility_sq(Qs, qs, bs, Ls, x, anc, anc_g, anc_h, anc_s)

        code = STOP_NONE
        if stop_opt and abs(f - fstar) <= opt_tol:
            if np.isnan(feas):
                feas = feasibility_sq(Qs, qs, bs, Ls, x, anc, anc_g, anc_h, anc_s)
            if feas <= feas_tol:
                code = STOP_FEAS_OPT
        if stop_move:
            ring[ring_state[0]] = step_sq
            ring_state[0] = (ring_state[0] + 1) % M
            if ring_state[1] < M:
                ring_state[1] += 1
            if code == STOP_NONE and ring_state[1] >= M and np.max(ring) <= move_tol:
                code = STOP_MOVEMENT

        rec_f[s] = f
        rec_feas[s] = feas
        rec_step[s] = step_sq
        rec_case[s] = case
        rec_idx[s] = i
        if code != STOP_NONE:
            return s + 1, code, -1
    return n_steps, STOP_NONE, -1
