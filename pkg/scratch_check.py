"""Scratch Monte-Carlo validation of the moment core (not part of the package)."""
import numpy as np
import jax

jax.config.update("jax_enable_x64", True)
import jax.numpy as jnp

import sys
sys.path.insert(0, "src")
import mtpolicy._mm as _mm

rng = np.random.default_rng(0)

# ---- GP moment matching vs MC ----
d, n, e = 3, 6, 2
X = rng.normal(size=(n, d))
log_ell = rng.normal(size=(e, d)) * 0.3
log_sf2 = rng.normal(size=(e,)) * 0.3
log_sn2 = np.log(np.array([0.01, 0.02]))
# consistent beta: sample targets from prior-ish scale
chols = []
betas = []
for a in range(e):
    lam = np.exp(2 * log_ell[a])
    diff = X[:, None, :] - X[None, :, :]
    K = np.exp(log_sf2[a]) * np.exp(-0.5 * np.sum(diff**2 / lam, axis=2))
    Kn = K + np.exp(log_sn2[a]) * np.eye(n)
    L = np.linalg.cholesky(Kn)
    y = L @ rng.normal(size=n)
    betas.append(np.linalg.solve(Kn, y))
    chols.append(L)
beta = np.stack(betas)
chol = np.stack(chols)

m = rng.normal(size=d) * 0.5
A = rng.normal(size=(d, d)) * 0.4
S = A @ A.T

mean, cov, v = _mm.gp_moments(
    jnp.array(X), jnp.array(beta), jnp.array(chol),
    jnp.array(log_ell), jnp.array(log_sf2), jnp.array(log_sn2),
    jnp.array(m), jnp.array(S), include_noise=True)
cross = S @ np.array(v)

# MC
N = 2_000_000
z = rng.multivariate_normal(m, S, size=N)
ys = np.zeros((N, e))
for a in range(e):
    lam = np.exp(2 * log_ell[a])
    k = np.exp(log_sf2[a]) * np.exp(-0.5 * np.sum((z[:, None, :] - X[None, :, :])**2 / lam, axis=2))
    mu_z = k @ beta[a]
    half = np.linalg.solve(chol[a], k.T)
    var_z = np.exp(log_sf2[a]) - np.sum(half**2, axis=0) + np.exp(log_sn2[a])
    ys[:, a] = mu_z + np.sqrt(np.maximum(var_z, 0)) * rng.normal(size=N)

print("mean analytic:", np.array(mean))
print("mean MC      :", ys.mean(axis=0), "+-", ys.std(axis=0) / np.sqrt(N))
print("cov analytic:\n", np.array(cov))
print("cov MC:\n", np.cov(ys.T))
cmc = np.zeros((d, e))
for a in range(e):
    for k_ in range(d):
        cmc[k_, a] = np.mean((z[:, k_] - m[k_]) * (ys[:, a] - ys[:, a].mean()))
print("cross analytic:\n", cross)
print("cross MC:\n", cmc)

# deterministic reduction
mean0, cov0, v0 = _mm.gp_moments(
    jnp.array(X), jnp.array(beta), jnp.array(chol),
    jnp.array(log_ell), jnp.array(log_sf2), jnp.array(log_sn2),
    jnp.array(m), jnp.zeros((d, d)), include_noise=True)
pm, pv = _mm.gp_point(jnp.array(X), jnp.array(beta), jnp.array(chol),
                      jnp.array(log_ell), jnp.array(log_sf2), jnp.array(log_sn2),
                      jnp.array(m), include_noise=True)
print("det reduction mean:", np.abs(np.array(mean0) - np.array(pm)).max())
print("det reduction var :", np.abs(np.diag(np.array(cov0)) - np.array(pv)).max())
print("offdiag at S=0:", np.abs(np.array(cov0)[0, 1]))

# ---- trig moments vs MC ----
m2 = np.array([0.3, -1.2])
A2 = rng.normal(size=(2, 2)) * 0.6
S2 = A2 @ A2.T
me, se = _mm.extend_trig(jnp.array(m2), jnp.array(S2), (1,))
z2 = rng.multivariate_normal(m2, S2, size=N)
ext = np.column_stack([z2, np.sin(z2[:, 1]), np.cos(z2[:, 1])])
print("trig mean err:", np.abs(np.array(me) - ext.mean(axis=0)).max())
print("trig cov err :", np.abs(np.array(se) - np.cov(ext.T)).max())

# ---- squash moments vs MC ----
mv = np.array([0.5, -2.0])
Av = rng.normal(size=(2, 2)) * 0.8
Sv = Av @ Av.T
bound = np.array([2.0, 5.0])
mu_u, Su, kap = _mm.squash_moments(jnp.array(mv), jnp.array(Sv), jnp.array(bound))
vz = rng.multivariate_normal(mv, Sv, size=N)
uz = np.array(_mm.squash_point(jnp.array(vz), jnp.array(bound)))
print("squash mean err:", np.abs(np.array(mu_u) - uz.mean(axis=0)).max())
print("squash cov err :", np.abs(np.array(Su) - np.cov(uz.T)).max())
cvu = np.zeros((2, 2))
for i in range(2):
    for j in range(2):
        cvu[i, j] = np.mean((vz[:, i] - mv[i]) * (uz[:, j] - uz[:, j].mean(axis=0)))
print("squash cross err:", np.abs(Sv @ np.diag(np.array(kap)) - cvu).max())

# ---- expected sat cost vs quadrature (1-D linear feature) ----
from numpy.polynomial.hermite_e import hermegauss
nodes, wts = hermegauss(80)
mu_c, s_c, q_c, tgt = 0.4, 0.55, 3.0, -0.2
feat_lin = np.array([[1.0]])
feat_off = np.array([-tgt])
W = np.array([[q_c]])
val = _mm.expected_sat_cost(jnp.array([mu_c]), jnp.array([[s_c]]),
                            jnp.array(feat_lin), jnp.array(feat_off), jnp.array(W), ())
xq = mu_c + np.sqrt(s_c) * nodes
cq = 1 - np.exp(-0.5 * q_c * (xq - tgt) ** 2)
quad = np.sum(wts * cq) / np.sqrt(2 * np.pi)
print("cost closed form:", float(val), "quad:", quad, "err:", abs(float(val) - quad))
