"""Closed-form Gaussian moment maps (jax.numpy, pure functions).

Every function here takes and returns plain arrays so that the whole
cascade (task augmentation -> trig features -> controller -> squash ->
GP dynamics -> cost) is differentiable end to end with jax.

Cross-covariances are carried in "premultiplied" form
``V = Sigma_in^{-1} Cov(in, out)``, which every map below admits in
closed form without inverting Sigma_in.  Chaining two maps under the
joint-Gaussian approximation is then a plain matrix product, and the
actual cross-covariance is recovered as ``Sigma_in @ V``.
"""

import jax.numpy as jnp
from jax.scipy.linalg import cho_solve, solve_triangular

SIN_SQUASH_W1 = 9.0 / 8.0
SIN_SQUASH_W3 = 1.0 / 8.0


def sym(a):
    return 0.5 * (a + a.T)


# ---------------------------------------------------------------------------
# trigonometric augmentation
# ---------------------------------------------------------------------------


def _expected_sin_sin(c1, c2, m1, m2, v11, v22, v12):
    """E[sin(c1 x1) sin(c2 x2)] for jointly Gaussian (x1, x2)."""
    decay = -0.5 * (c1 * c1 * v11 + c2 * c2 * v22)
    return 0.5 * (
        jnp.cos(c1 * m1 - c2 * m2) * jnp.exp(decay + c1 * c2 * v12)
        - jnp.cos(c1 * m1 + c2 * m2) * jnp.exp(decay - c1 * c2 * v12)
    )


def _expected_cos_cos(m1, m2, v11, v22, v12):
    decay = -0.5 * (v11 + v22)
    return 0.5 * (
        jnp.cos(m1 - m2) * jnp.exp(decay + v12)
        + jnp.cos(m1 + m2) * jnp.exp(decay - v12)
    )


def _expected_sin_cos(m1, m2, v11, v22, v12):
    decay = -0.5 * (v11 + v22)
    return 0.5 * (
        jnp.sin(m1 - m2) * jnp.exp(decay + v12)
        + jnp.sin(m1 + m2) * jnp.exp(decay - v12)
    )


def extend_trig(m, s, angles):
    """Append exact (sin, cos) moments for the given coordinates.

    For x ~ N(m, s) returns the Gaussian approximation of
    (x, sin x_a1, cos x_a1, sin x_a2, ...) with the exact first two
    moments of the extended vector.  ``angles`` must be a static tuple.
    """
    d = m.shape[0]
    if not angles:
        return m, s

    means = [m]
    for i in angles:
        e = jnp.exp(-0.5 * s[i, i])
        means.append(jnp.stack([e * jnp.sin(m[i]), e * jnp.cos(m[i])]))
    m_ext = jnp.concatenate(means)

    k = len(angles)
    out = jnp.zeros((d + 2 * k, d + 2 * k))
    out = out.at[:d, :d].set(s)

    # cross terms with the linear block (Stein's lemma)
    for a, i in enumerate(angles):
        e = jnp.exp(-0.5 * s[i, i])
        col_sin = s[:, i] * (e * jnp.cos(m[i]))
        col_cos = s[:, i] * (-e * jnp.sin(m[i]))
        out = out.at[:d, d + 2 * a].set(col_sin)
        out = out.at[:d, d + 2 * a + 1].set(col_cos)
        out = out.at[d + 2 * a, :d].set(col_sin)
        out = out.at[d + 2 * a + 1, :d].set(col_cos)

    # trig-trig block
    for a, i in enumerate(angles):
        for b, j in enumerate(angles):
            mi, mj = m[i], m[j]
            vii, vjj, vij = s[i, i], s[j, j], s[i, j]
            esi = jnp.exp(-0.5 * vii)
            esj = jnp.exp(-0.5 * vjj)
            ss = _expected_sin_sin(1.0, 1.0, mi, mj, vii, vjj, vij) - (
                esi * jnp.sin(mi)
            ) * (esj * jnp.sin(mj))
            cc = _expected_cos_cos(mi, mj, vii, vjj, vij) - (esi * jnp.cos(mi)) * (
                esj * jnp.cos(mj)
            )
            sc = _expected_sin_cos(mi, mj, vii, vjj, vij) - (esi * jnp.sin(mi)) * (
                esj * jnp.cos(mj)
            )
            cs = _expected_sin_cos(mj, mi, vjj, vii, vij) - (esj * jnp.sin(mj)) * (
                esi * jnp.cos(mi)
            )
            out = out.at[d + 2 * a, d + 2 * b].set(ss)
            out = out.at[d + 2 * a + 1, d + 2 * b + 1].set(cc)
            out = out.at[d + 2 * a, d + 2 * b + 1].set(sc)
            out = out.at[d + 2 * a + 1, d + 2 * b].set(cs)

    return m_ext, sym(out)


def trig_point(x, angles):
    """Deterministic counterpart of extend_trig for a point input."""
    if not angles:
        return x
    parts = [x]
    for i in angles:
        parts.append(jnp.stack([jnp.sin(x[i]), jnp.cos(x[i])]))
    return jnp.concatenate(parts)


# ---------------------------------------------------------------------------
# SE-ARD Gaussian process moment matching
# ---------------------------------------------------------------------------


def gp_moments(
    x_train,
    beta,
    chol,
    log_ell,
    log_sf2,
    log_sn2,
    m,
    s,
    *,
    deterministic=False,
    include_noise=False,
):
    """Exact moments of a multi-output SE-ARD GP under a Gaussian input.

    x_train:  (n, d) kernel centers.
    beta:     (e, n) dual weights, one row per output.
    chol:     (e, n, n) lower Cholesky factors of K + sn2*I, or None
              when ``deterministic`` (no model-uncertainty term).
    log_ell:  (e, d) log lengthscales, log_sf2/log_sn2: (e,).
    m, s:     input mean (d,) and covariance (d, d).

    Returns (mean (e,), cov (e, e), v (d, e)) where
    ``v = s^{-1} Cov(input, output)`` is computed without inverting s.
    """
    n, d = x_train.shape
    e_out = beta.shape[0]
    s = sym(s)
    zeta = x_train - m[None, :]  # (n, d)

    lam = jnp.exp(2.0 * log_ell)  # (e, d)
    ilam = jnp.exp(-2.0 * log_ell)

    q_all = []
    logk_all = []
    v_cols = []
    means = []
    for a in range(e_out):
        b_mat = s + jnp.diag(lam[a])
        cb = jnp.linalg.cholesky(b_mat)
        half = solve_triangular(cb, zeta.T, lower=True)  # (d, n)
        quad = jnp.sum(half * half, axis=0)  # zeta^T B^{-1} zeta
        logdet_b = 2.0 * jnp.sum(jnp.log(jnp.diag(cb)))
        log_q = log_sf2[a] + jnp.sum(log_ell[a]) - 0.5 * logdet_b - 0.5 * quad
        q = jnp.exp(log_q)
        q_all.append(q)
        means.append(jnp.dot(beta[a], q))
        t_mat = cho_solve((cb, True), zeta.T).T  # (n, d) rows B^{-1} zeta_i
        v_cols.append(t_mat.T @ (beta[a] * q))
        logk_all.append(log_sf2[a] - 0.5 * jnp.sum(zeta * zeta * ilam[a], axis=1))

    mean = jnp.stack(means)
    v = jnp.stack(v_cols, axis=1)  # (d, e)

    cov = jnp.zeros((e_out, e_out))
    for a in range(e_out):
        u_a = zeta * ilam[a]  # (n, d)
        for b in range(a, e_out):
            w_b = zeta * ilam[b]
            g = ilam[a] + ilam[b]  # (d,)
            s_sym = g[:, None] * s * g[None, :] + jnp.diag(g)
            cs = jnp.linalg.cholesky(s_sym)
            logdet_r = 2.0 * jnp.sum(jnp.log(jnp.diag(cs))) - jnp.sum(jnp.log(g))
            r_inv_s = cho_solve((cs, True), g[:, None] * s)  # R^{-1} S, symmetric
            ua_m = u_a @ r_inv_s  # (n, d)
            wb_m = w_b @ r_inv_s
            qa = jnp.sum(ua_m * u_a, axis=1)  # (n,)
            qb = jnp.sum(wb_m * w_b, axis=1)
            cross = ua_m @ w_b.T  # (n, n)
            expo = (
                logk_all[a][:, None]
                + logk_all[b][None, :]
                + 0.5 * (qa[:, None] + qb[None, :])
                + cross
                - 0.5 * logdet_r
            )
            q_mat = jnp.exp(expo)
            second = beta[a] @ q_mat @ beta[b]
            val = second - mean[a] * mean[b]
            if a == b and not deterministic:
                ik = cho_solve((chol[a], True), jnp.eye(n))
                val = val + jnp.exp(log_sf2[a]) - jnp.sum(ik * q_mat)
                if include_noise:
                    val = val + jnp.exp(log_sn2[a])
            cov = cov.at[a, b].set(val)
            if a != b:
                cov = cov.at[b, a].set(val)

    return mean, sym(cov), v


def gp_point(x_train, beta, chol, log_ell, log_sf2, log_sn2, z, *, deterministic=False, include_noise=False):
    """GP predictive mean/variance at a deterministic input z."""
    e_out = beta.shape[0]
    diff = x_train - z[None, :]
    means = []
    variances = []
    for a in range(e_out):
        k = jnp.exp(log_sf2[a] - 0.5 * jnp.sum(diff * diff * jnp.exp(-2.0 * log_ell[a]), axis=1))
        means.append(jnp.dot(beta[a], k))
        if deterministic:
            variances.append(jnp.asarray(0.0))
        else:
            half = solve_triangular(chol[a], k, lower=True)
            var = jnp.exp(log_sf2[a]) - jnp.sum(half * half)
            if include_noise:
                var = var + jnp.exp(log_sn2[a])
            variances.append(var)
    return jnp.stack(means), jnp.stack(variances)


# ---------------------------------------------------------------------------
# third-order sine squashing
# ---------------------------------------------------------------------------


def squash_point(v, bound):
    """u = bound * (9 sin(v/bound) + sin(3 v/bound)) / 8, elementwise."""
    r = v / bound
    return bound * (SIN_SQUASH_W1 * jnp.sin(r) + SIN_SQUASH_W3 * jnp.sin(3.0 * r))


def squash_moments(m, s, bound):
    """Exact moments of the sine squash for v ~ N(m, s).

    Returns (mean, cov, kappa) with Cov(v, u) = s @ diag(kappa).
    """
    mr = m / bound
    sr = s / jnp.outer(bound, bound)
    dv = jnp.diag(sr)

    e1 = jnp.exp(-0.5 * dv)
    e3 = jnp.exp(-4.5 * dv)
    mean = bound * (SIN_SQUASH_W1 * e1 * jnp.sin(mr) + SIN_SQUASH_W3 * e3 * jnp.sin(3.0 * mr))
    kappa = SIN_SQUASH_W1 * e1 * jnp.cos(mr) + 3.0 * SIN_SQUASH_W3 * e3 * jnp.cos(3.0 * mr)

    mi = mr[:, None]
    mj = mr[None, :]
    vii = dv[:, None]
    vjj = dv[None, :]
    vij = sr

    second = (
        SIN_SQUASH_W1 * SIN_SQUASH_W1 * _expected_sin_sin(1.0, 1.0, mi, mj, vii, vjj, vij)
        + SIN_SQUASH_W1 * SIN_SQUASH_W3 * _expected_sin_sin(1.0, 3.0, mi, mj, vii, vjj, vij)
        + SIN_SQUASH_W3 * SIN_SQUASH_W1 * _expected_sin_sin(3.0, 1.0, mi, mj, vii, vjj, vij)
        + SIN_SQUASH_W3 * SIN_SQUASH_W3 * _expected_sin_sin(3.0, 3.0, mi, mj, vii, vjj, vij)
    )
    second = second * jnp.outer(bound, bound)
    cov = sym(second - jnp.outer(mean, mean))
    return mean, cov, kappa


# ---------------------------------------------------------------------------
# expected saturating cost
# ---------------------------------------------------------------------------


def expected_sat_cost(m, s, feat_lin, feat_off, weight, angles):
    """E[1 - exp(-0.5 dᵀ Q d)] for d = feat_lin @ trig(x) + feat_off.

    ``angles`` (static tuple) selects coordinates of x whose (sin, cos)
    pairs are appended before the linear map; the expectation over the
    trig-extended Gaussian is the usual determinant-scaled exponential.
    """
    me, se = extend_trig(m, sym(s), angles)
    md = feat_lin @ me + feat_off
    sd = sym(feat_lin @ se @ feat_lin.T)
    k = md.shape[0]
    a_mat = jnp.eye(k) + sd @ weight
    sol = jnp.linalg.solve(a_mat, md)
    _, logdet = jnp.linalg.slogdet(a_mat)
    val = jnp.exp(-0.5 * jnp.dot(md, weight @ sol) - 0.5 * logdet)
    return 1.0 - val


def sat_cost_point(x, feat_lin, feat_off, weight, angles):
    d = feat_lin @ trig_point(x, angles) + feat_off
    return 1.0 - jnp.exp(-0.5 * jnp.dot(d, weight @ d))
