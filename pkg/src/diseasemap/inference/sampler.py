"""Metropolis-within-Gibbs sampler for the Poisson space-time models.

Each sweep updates, in order: all fixed effects and latent blocks jointly
(when the model is small enough), the fixed effects, every latent block
(u, v, gamma, phi, then delta in region slices), and every precision by its
conjugate Gamma full conditional. Latent and fixed blocks use random-walk
Metropolis with Gaussian increments shaped by the local Poisson curvature
plus prior precision. Shapes and step scales adapt during burn-in only and
are frozen for the kept draws.

The joint move proposes fixed effects and the range-space coordinates of
every latent block from one Newton step of the log posterior at the current
state, with a Metropolis-Hastings correction using the reverse step. It
removes the strong posterior correlation between the intercept, the
covariate effects and the temporal effects.

Three auxiliary moves target directions the likelihood cannot see, each
leaving the posterior invariant:

* split: u and v (likewise gamma and phi) enter the predictor only through
  their sum, so both precisions are updated with the structured effect
  integrated out and the split of the sum is then drawn exactly;
* shift: a fixed-effect column that is constant within the cells of a
  latent element (the intercept against v, density against u and v) can
  trade mass with that block; the trade is drawn exactly;
* rescale: (x, tau) -> (c x, tau / c^2) is a Metropolis move along the
  prior funnel, needed when the data say little about a block.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import linalg
from scipy.special import gammaln

from ..dataprep import Panel
from ..gmrf import DENSE_CHECK_LIMIT
from ..models import ModelSpec, Registry

logger = logging.getLogger(__name__)

# log-precision grid (low, high, cells per axis) for the pair independence proposal
PAIR_GRID = (-4.0, 14.0, 48)


class SamplerDivergence(FloatingPointError):
    def __init__(self, block, value):
        super().__init__(f"log-posterior became {value} after updating block {block!r}")
        self.block = block


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    n_iterations: int = 20_000
    burn_in: int = 10_000
    thinning: int = 5
    seed: int = 0
    adapt_interval: int = 50
    target_accept_block: float = 0.234
    target_accept_scalar: float = 0.44
    delta_blocking: str = "region"  # "region" slices or "full"
    init_jitter: float = 0.1
    n_jobs: int = 1
    joint_update: str = "auto"  # "auto", "on" or "off"
    joint_max_dim: int = 600

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iterations:
            raise ValueError("burn_in must be smaller than n_iterations")
        if self.n_chains < 1 or self.thinning < 1:
            raise ValueError("n_chains and thinning must be positive")
        if self.delta_blocking not in ("region", "full"):
            raise ValueError("delta_blocking must be 'region' or 'full'")
        if self.joint_update not in ("auto", "on", "off"):
            raise ValueError("joint_update must be 'auto', 'on' or 'off'")

    @property
    def n_kept(self) -> int:
        return (self.n_iterations - self.burn_in) // self.thinning

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class PosteriorSamples:
    chains: list[np.ndarray]
    registry: Registry
    acceptance: dict[str, float] = field(default_factory=dict)
    config: SamplerConfig | None = None
    model: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    @property
    def pooled(self) -> np.ndarray:
        return np.vstack(self.chains)

    def block(self, name) -> np.ndarray:
        """Pooled draws of one registry block, shape (draws, block_dim)."""
        return self.pooled[:, self.registry[name]]

    def precisions(self, name) -> np.ndarray:
        return np.exp(self.block(f"log_tau_{name}")[:, 0])


def sample_precision(quad: float, rank: int, rng: np.random.Generator, shape: float = 1.0,
                     rate: float = 5e-5, size=None):
    """Draw tau ~ Gamma(shape + rank/2, rate + quad/2) (rate parameterisation)."""
    return rng.gamma(shape + 0.5 * rank, 1.0 / (rate + 0.5 * quad), size=size)


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(chain,))))


class _Block:
    """One Metropolis-updated block and its adaptive proposal state."""

    def __init__(self, name, sl, groups, target_scalar, target_block):
        self.name = name
        self.sl = sl
        self.groups = groups
        self.chol = [np.diag(np.ones(len(g))) for g in groups]
        self.log_scale = np.array([np.log(2.38 / np.sqrt(len(g))) for g in groups])
        self.target = np.array([target_scalar if len(g) == 1 else target_block for g in groups])
        self.window_acc = np.zeros(len(groups))
        self.window_n = np.zeros(len(groups))
        self.accepted = 0
        self.proposed = 0


class ChainRunner:
    """Runs one chain of the sampler for a model and panel."""

    def __init__(self, spec: ModelSpec, panel: Panel, config: SamplerConfig):
        self.spec = spec
        self.config = config
        reg = spec.registry
        self.reg = reg
        mask = (panel.expected > 0).ravel()
        self.O = panel.observed.ravel()[mask].astype(float)
        self.logE = np.log(panel.expected.ravel()[mask])
        self.X = spec.design_matrix(panel)[mask]
        self.const = -float(np.sum(gammaln(self.O + 1.0)))
        self.latent = []
        for b in spec.random_blocks:
            idx = b.cell_index.ravel()[mask]
            if b.name == "delta" and config.delta_blocking == "region":
                n, nt = b.n_units
                groups = [np.arange(i * nt, (i + 1) * nt) for i in range(n)]
            else:
                groups = [np.arange(b.dim)]
            mb = _Block(b.name, reg[b.name], groups, config.target_accept_scalar, config.target_accept_block)
            mb.spec_block = b
            mb.idx = idx
            mb.R = b.structure.matrix
            mb.R_dense_groups = [b.structure.matrix[g][:, g].toarray() for g in groups]
            mb.is_identity = b.structure.rank_deficiency == 0 and b.structure.label.startswith("iid")
            mb.tau_slot = reg[f"log_tau_{b.name}"].start
            self.latent.append(mb)
        p = spec.n_fixed
        self.fixed = _Block("fixed", reg["fixed"], [np.arange(p)], config.target_accept_scalar,
                            config.target_accept_block)
        self.prior_prec = 0.0 if spec.flat_prior else 1.0 / spec.fixed_prior_sd**2
        self.by_name = {mb.name: mb for mb in self.latent}
        self.pairs = [
            self._pair_state(self.by_name[a], self.by_name[b]) for a, b in (("u", "v"), ("gamma", "phi"))
            if a in self.by_name and b in self.by_name
            and np.array_equal(self.by_name[a].idx, self.by_name[b].idx)
            and self.by_name[b].is_identity
        ]
        self.shifts = self._confounded_directions()
        self.joint = self._joint_state()
        for mb in self.latent:
            mb.rescale_log_step = np.log(0.5)
            mb.rescale_acc = mb.rescale_n = 0

    def _confounded_directions(self):
        """(fixed column, block, c, c'R) with X[:, j] == c[idx] and c compatible with the constraints."""
        out = []
        for mb in self.latent:
            dim = mb.spec_block.dim
            counts = np.bincount(mb.idx, minlength=dim)
            for j in range(self.X.shape[1]):
                col = self.X[:, j]
                c = np.divide(np.bincount(mb.idx, weights=col, minlength=dim), counts,
                              out=np.zeros(dim), where=counts > 0)
                if np.max(np.abs(col - c[mb.idx])) > 1e-10 * (1.0 + np.max(np.abs(col))):
                    continue
                if np.max(np.abs(mb.spec_block.constraints.project(c) - c)) > 1e-8 * (1.0 + np.max(np.abs(c))):
                    continue
                cR = mb.R @ c
                if float(c @ cR) <= 1e-12:
                    continue
                out.append((j, mb, c, cR))
        return out

    def _joint_state(self):
        """Reduced coordinates for the joint Newton move: fixed effects plus each latent block
        in the eigenbasis of its structure's range, where the prior precision is diagonal."""
        cfg = self.config
        if cfg.joint_update == "off":
            return None
        p = self.X.shape[1]
        bases, prior, cols, members = [np.eye(p)], [np.full(p, self.prior_prec)], [sp.csr_matrix(self.X)], []
        dim = p
        n_cells = len(self.O)
        for mb in self.latent:
            S = mb.spec_block.structure
            if S.dim > DENSE_CHECK_LIMIT:
                continue
            vals, vecs = np.linalg.eigh(S.dense())
            keep = vals > 1e-8 * vals.max()
            if cfg.joint_update == "auto" and dim + keep.sum() > cfg.joint_max_dim:
                continue
            bases.append(vecs[:, keep])
            prior.append(vals[keep])
            cols.append(sp.csr_matrix((np.ones(n_cells), (np.arange(n_cells), mb.idx)), shape=(n_cells, S.dim)))
            members.append(mb)
            dim += int(keep.sum())
        if not members:
            return None
        T = linalg.block_diag(*bases)
        ZT = np.asarray(sp.hstack(cols, format="csr") @ T)
        return {"ZT": ZT, "T": T, "prior_vals": prior,
                "members": members, "dims": [b.shape[1] for b in bases], "acc": 0, "n": 0}

    def _joint_coords(self, theta):
        J = self.joint
        parts = [theta[self.reg["fixed"]]]
        for mb, B in zip(J["members"], self._joint_bases()):
            parts.append(B.T @ theta[mb.sl])
        return np.concatenate(parts)

    def _joint_bases(self):
        J = self.joint
        out, start = [], J["dims"][0]
        T = J["T"]
        row = T.shape[0] - sum(mb.spec_block.dim for mb in J["members"])
        for mb, d in zip(J["members"], J["dims"][1:]):
            out.append(T[row:row + mb.spec_block.dim, start:start + d])
            row += mb.spec_block.dim
            start += d
        return out

    def _joint_prior(self, theta):
        J = self.joint
        taus = [np.ones(J["dims"][0])] + [np.full(d, np.exp(theta[mb.tau_slot]))
                                          for mb, d in zip(J["members"], J["dims"][1:])]
        return np.concatenate(taus) * np.concatenate(J["prior_vals"])

    def _joint_newton(self, w, lin, prior):
        J = self.joint
        eta = np.exp(lin)
        ZT = J["ZT"]
        H = (ZT.T * eta) @ ZT
        H[np.diag_indices_from(H)] += prior + 1e-10
        grad = ZT.T @ (self.O - eta) - prior * w
        C = linalg.cholesky(H, lower=True)
        mean = w + linalg.cho_solve((C, True), grad)
        return mean, C, ZT

    @staticmethod
    def _gauss_logpdf(x, mean, C):
        r = C.T @ (x - mean)
        return float(np.sum(np.log(np.diag(C))) - 0.5 * r @ r)

    def update_joint(self, theta, lin, ll, rng):
        """Metropolis-Hastings with a Gaussian proposal from one Newton step at the current state."""
        J = self.joint
        prior = self._joint_prior(theta)
        w = self._joint_coords(theta)
        try:
            mean, C, ZT = self._joint_newton(w, lin, prior)
        except linalg.LinAlgError:
            return lin, ll
        wp = mean + linalg.solve_triangular(C.T, rng.standard_normal(len(w)), lower=False)
        lin_p = lin + ZT @ (wp - w)
        ll_p = self.loglik(lin_p)
        J["n"] += 1
        if not np.isfinite(ll_p):
            return lin, ll
        try:
            mean_r, C_r, _ = self._joint_newton(wp, lin_p, prior)
        except linalg.LinAlgError:
            return lin, ll
        log_r = (ll_p - 0.5 * float(prior @ wp**2)) - (ll - 0.5 * float(prior @ w**2))
        log_r += self._gauss_logpdf(w, mean_r, C_r) - self._gauss_logpdf(wp, mean, C)
        if np.log(rng.uniform()) < log_r:
            p = J["dims"][0]
            theta[self.reg["fixed"]] = wp[:p]
            start = p
            for mb, B, d in zip(J["members"], self._joint_bases(), J["dims"][1:]):
                theta[mb.sl] = mb.spec_block.constraints.project(B @ wp[start:start + d])
                start += d
            J["acc"] += 1
            return lin_p, ll_p
        return lin, ll

    # --- densities ------------------------------------------------------

    def loglik(self, lin) -> float:
        return float(np.sum(self.O * lin - np.exp(lin))) + self.const

    def linear(self, theta) -> np.ndarray:
        lin = self.logE + self.X @ theta[self.reg["fixed"]]
        for mb in self.latent:
            lin = lin + theta[mb.sl][mb.idx]
        return lin

    def quad(self, mb, x) -> float:
        return float(x @ x) if mb.is_identity else float(x @ (mb.R @ x))

    def log_posterior(self, theta) -> float:
        lp = self.loglik(self.linear(theta))
        beta = theta[self.reg["fixed"]]
        lp -= 0.5 * self.prior_prec * float(beta @ beta)
        for mb in self.latent:
            b = mb.spec_block
            lt = theta[mb.tau_slot]
            lp += 0.5 * b.structure.rank * lt - 0.5 * np.exp(lt) * self.quad(mb, theta[mb.sl])
            lp += b.prior_shape * lt - b.prior_rate * np.exp(lt)  # Gamma prior on tau, Jacobian of log
        return lp

    # --- initial state ----------------------------------------------------

    def initial_state(self, rng) -> np.ndarray:
        theta = self.spec.zeros()
        beta = self._glm_start()
        beta = beta + self.config.init_jitter * rng.standard_normal(beta.size)
        theta[self.reg["fixed"]] = beta
        for mb in self.latent:
            theta[mb.tau_slot] = np.log(10.0) + self.config.init_jitter * rng.standard_normal()
        return theta

    def _glm_start(self, iters: int = 50) -> np.ndarray:
        """Newton iterations for the fixed-effects-only Poisson fit."""
        X, O = self.X, self.O
        beta = np.zeros(X.shape[1])
        beta[0] = np.log(O.sum() / np.exp(self.logE).sum()) if O.sum() > 0 else 0.0
        for _ in range(iters):
            eta = np.exp(self.logE + X @ beta)
            grad = X.T @ (O - eta) - self.prior_prec * beta
            H = (X.T * eta) @ X + self.prior_prec * np.eye(X.shape[1])
            try:
                step = linalg.solve(H, grad, assume_a="pos")
            except (linalg.LinAlgError, ValueError):
                break
            beta = beta + step
            if np.max(np.abs(step)) < 1e-10:
                break
        return beta

    # --- adaptation -------------------------------------------------------

    def refresh_shapes(self, theta, lin):
        eta = np.exp(lin)
        X = self.X
        H = (X.T * eta) @ X + (self.prior_prec + 1e-10) * np.eye(X.shape[1])
        self.fixed.chol = [_inverse_chol(H)]
        for mb in self.latent:
            tau = np.exp(theta[mb.tau_slot])
            info = np.bincount(mb.idx, weights=eta, minlength=mb.spec_block.dim)
            shapes = []
            for g, Rg in zip(mb.groups, mb.R_dense_groups):
                Hg = tau * Rg
                Hg[np.diag_indices_from(Hg)] += info[g] + 1e-8 * (tau + 1.0)
                shapes.append(_inverse_chol(Hg))
            mb.chol = shapes

    @staticmethod
    def adapt(mb: _Block, k: int):
        rate = np.divide(mb.window_acc, mb.window_n, out=mb.target.copy(), where=mb.window_n > 0)
        mb.log_scale += 2.0 * (rate - mb.target) / np.sqrt(k + 1.0)
        mb.window_acc[:] = 0
        mb.window_n[:] = 0

    # --- updates ----------------------------------------------------------

    def update_fixed(self, theta, lin, ll, rng):
        mb = self.fixed
        beta = theta[mb.sl]
        step = np.exp(mb.log_scale[0]) * (mb.chol[0] @ rng.standard_normal(beta.size))
        lin_p = lin + self.X @ step
        ll_p = self.loglik(lin_p)
        beta_p = beta + step
        log_r = ll_p - ll - 0.5 * self.prior_prec * (beta_p @ beta_p - beta @ beta)
        mb.window_n[0] += 1
        mb.proposed += 1
        if np.log(rng.uniform()) < log_r:
            theta[mb.sl] = beta_p
            mb.window_acc[0] += 1
            mb.accepted += 1
            return lin_p, ll_p
        return lin, ll

    def update_latent(self, mb, theta, lin, ll, rng):
        cons = mb.spec_block.constraints
        x = theta[mb.sl].copy()
        q = self.quad(mb, x)
        tau = np.exp(theta[mb.tau_slot])
        for k, g in enumerate(mb.groups):
            step = np.exp(mb.log_scale[k]) * (mb.chol[k] @ rng.standard_normal(len(g)))
            xp = x.copy()
            xp[g] += step
            xp = cons.project(xp)
            d = xp - x
            lin_p = lin + d[mb.idx]
            ll_p = self.loglik(lin_p)
            q_p = self.quad(mb, xp)
            log_r = ll_p - ll - 0.5 * tau * (q_p - q)
            mb.window_n[k] += 1
            mb.proposed += 1
            if np.log(rng.uniform()) < log_r:
                x, lin, ll, q = xp, lin_p, ll_p, q_p
                mb.window_acc[k] += 1
                mb.accepted += 1
        theta[mb.sl] = x
        if not np.isfinite(ll):
            raise SamplerDivergence(mb.name, ll)
        return lin, ll

    def update_precision(self, mb, theta, rng):
        b = mb.spec_block
        tau = sample_precision(self.quad(mb, theta[mb.sl]), b.structure.rank, rng, b.prior_shape, b.prior_rate)
        if not (np.isfinite(tau) and tau > 0):
            raise SamplerDivergence(f"tau_{mb.name}", tau)
        theta[mb.tau_slot] = np.log(tau)

    def _pair_state(self, first, second):
        vals, vecs = np.linalg.eigh(first.R.toarray())
        keep = vals > 1e-8 * vals.max()
        return {"first": first, "second": second, "vals": np.where(keep, vals, 0.0), "range": keep,
                "vecs": vecs, "log_step": np.log(0.7), "acc": 0, "n": 0}

    def update_pair(self, pair, theta, rng):
        """Joint update of a structured/IID pair given their sum z.

        Both log-precisions move by random-walk Metropolis on the density with
        the structured effect integrated out; then the split of z is drawn
        exactly in the eigenbasis of the structure matrix.
        """
        first, second = pair["first"], pair["second"]
        vals, keep, V = pair["vals"], pair["range"], pair["vecs"]
        z = theta[first.sl] + theta[second.sl]
        zt = V.T @ z
        pa, pb = first.spec_block, second.spec_block

        lam, zr2 = vals[keep], zt[keep] ** 2
        k0, s0 = int(np.sum(~keep)), float(np.sum(zt[~keep] ** 2))

        def log_target(l1, l2):
            l1, l2 = np.asarray(l1, float), np.asarray(l2, float)
            t1, t2 = np.exp(l1), np.exp(l2)
            var = 1.0 / (t1[..., None] * lam) + 1.0 / t2[..., None]
            lp = -0.5 * (np.log(var).sum(-1) + (zr2 / var).sum(-1) - k0 * l2 + t2 * s0)
            return lp + pa.prior_shape * l1 - pa.prior_rate * t1 + pb.prior_shape * l2 - pb.prior_rate * t2

        l1, l2 = theta[first.tau_slot], theta[second.tau_slot]
        cur = float(log_target(l1, l2))
        step = np.exp(pair["log_step"]) * rng.standard_normal(2)
        prop = float(log_target(l1 + step[0], l2 + step[1]))
        pair["n"] += 1
        if np.log(rng.uniform()) < prop - cur:
            l1, l2, cur = l1 + step[0], l2 + step[1], prop
            pair["acc"] += 1
        l1, l2 = self._grid_jump(log_target, l1, l2, cur, rng)
        t1, t2 = np.exp(l1), np.exp(l2)
        prec = np.where(keep, t1 * vals + t2, 1.0)
        ut = np.where(keep, t2 * zt / prec + rng.standard_normal(len(zt)) / np.sqrt(prec), 0.0)
        u = first.spec_block.constraints.project(V @ ut)
        theta[first.tau_slot], theta[second.tau_slot] = l1, l2
        theta[first.sl] = u
        theta[second.sl] = z - u

    @staticmethod
    def _grid_jump(log_target, l1, l2, cur, rng):
        """Independence Metropolis step proposing from a piecewise-uniform grid fit of the target."""
        lo, hi, m = PAIR_GRID
        width = (hi - lo) / m
        centres = lo + width * (np.arange(m) + 0.5)
        g1, g2 = np.meshgrid(centres, centres, indexing="ij")
        logw = log_target(g1, g2).ravel()
        logw -= logw.max()
        w = np.exp(logw)
        w /= w.sum()
        cell = rng.choice(w.size, p=w)
        i, j = divmod(cell, m)
        p1 = lo + width * (i + rng.uniform())
        p2 = lo + width * (j + rng.uniform())

        def log_q(a, b):
            ia, jb = int((a - lo) // width), int((b - lo) // width)
            if not (0 <= ia < m and 0 <= jb < m):
                return -np.inf
            return float(np.log(w[ia * m + jb]))

        prop = float(log_target(p1, p2))
        log_r = prop - cur + log_q(l1, l2) - log_q(p1, p2)
        if np.log(rng.uniform()) < log_r:
            return p1, p2
        return l1, l2

    def adapt_pair(self, pair, k):
        target = self.config.target_accept_scalar
        rate = pair["acc"] / pair["n"] if pair["n"] else target
        pair["log_step"] += 2.0 * (rate - target) / np.sqrt(k + 1.0)
        pair["acc"] = pair["n"] = 0

    def update_shifts(self, theta, rng):
        """Exact draw along each fixed/latent direction that leaves the predictor unchanged."""
        fixed = self.reg["fixed"].start
        for j, mb, c, cR in self.shifts:
            x = theta[mb.sl]
            tau = np.exp(theta[mb.tau_slot])
            beta_j = theta[fixed + j]
            prec = tau * float(c @ cR) + self.prior_prec
            mean = (tau * float(cR @ x) - self.prior_prec * beta_j) / prec
            step = mean + rng.standard_normal() / np.sqrt(prec)
            theta[fixed + j] = beta_j + step
            theta[mb.sl] = x - step * c

    def update_rescale(self, mb, theta, lin, ll, rng):
        """Metropolis move (x, tau) -> (c x, tau / c^2); the x-prior term and Jacobian cancel."""
        b = mb.spec_block
        log_c = np.exp(mb.rescale_log_step) * rng.standard_normal()
        x = theta[mb.sl]
        xp = np.exp(log_c) * x
        lin_p = lin + (xp - x)[mb.idx]
        ll_p = self.loglik(lin_p)
        lt = theta[mb.tau_slot]
        lt_p = lt - 2.0 * log_c
        log_r = ll_p - ll + b.prior_shape * (lt_p - lt) - b.prior_rate * (np.exp(lt_p) - np.exp(lt))
        mb.rescale_n += 1
        if np.log(rng.uniform()) < log_r:
            theta[mb.sl] = xp
            theta[mb.tau_slot] = lt_p
            mb.rescale_acc += 1
            return lin_p, ll_p
        return lin, ll

    def adapt_rescale(self, mb, k):
        rate = mb.rescale_acc / mb.rescale_n if mb.rescale_n else self.config.target_accept_scalar
        mb.rescale_log_step += 2.0 * (rate - self.config.target_accept_scalar) / np.sqrt(k + 1.0)
        mb.rescale_acc = mb.rescale_n = 0

    # --- driver -----------------------------------------------------------

    def run(self, chain: int) -> tuple[np.ndarray, dict]:
        cfg = self.config
        rng = chain_rng(cfg.seed, chain)
        theta = self.initial_state(rng)
        lin = self.linear(theta)
        ll = self.loglik(lin)
        if not np.isfinite(ll):
            raise SamplerDivergence("initial state", ll)
        self.refresh_shapes(theta, lin)
        kept = np.empty((cfg.n_kept, theta.size))
        n_kept = 0
        blocks = [self.fixed] + self.latent
        window = 0
        for it in range(cfg.n_iterations):
            if self.joint is not None:
                lin, ll = self.update_joint(theta, lin, ll, rng)
                if it == cfg.burn_in:
                    self.joint["acc"] = self.joint["n"] = 0
            lin, ll = self.update_fixed(theta, lin, ll, rng)
            if not np.isfinite(ll):
                raise SamplerDivergence("fixed", ll)
            for mb in self.latent:
                lin, ll = self.update_latent(mb, theta, lin, ll, rng)
            for pair in self.pairs:
                self.update_pair(pair, theta, rng)
            if self.shifts:
                self.update_shifts(theta, rng)
            if self.pairs or self.shifts:
                lin = self.linear(theta)
                ll = self.loglik(lin)
            for mb in self.latent:
                self.update_precision(mb, theta, rng)
                lin, ll = self.update_rescale(mb, theta, lin, ll, rng)
            if not np.isfinite(ll):
                raise SamplerDivergence("auxiliary moves", ll)
            if it < cfg.burn_in:
                if (it + 1) % cfg.adapt_interval == 0:
                    for mb in blocks:
                        self.adapt(mb, window)
                    for mb in self.latent:
                        self.adapt_rescale(mb, window)
                    for pair in self.pairs:
                        self.adapt_pair(pair, window)
                    window += 1
                    self.refresh_shapes(theta, lin)
                if it + 1 == cfg.burn_in:
                    for mb in blocks:
                        mb.accepted = mb.proposed = 0
            elif (it - cfg.burn_in + 1) % cfg.thinning == 0 and n_kept < cfg.n_kept:
                kept[n_kept] = theta
                n_kept += 1
        acceptance = {mb.name: (mb.accepted / mb.proposed if mb.proposed else float("nan")) for mb in blocks}
        if self.joint is not None:
            acceptance["joint"] = self.joint["acc"] / self.joint["n"] if self.joint["n"] else float("nan")
        self._check_constraints(kept[:n_kept], rng)
        return kept[:n_kept], acceptance

    def _check_constraints(self, draws, rng, fraction=0.01):
        if not len(draws) or not self.latent:
            return
        m = max(1, int(round(fraction * len(draws))))
        rows = rng.choice(len(draws), size=m, replace=False)
        worst = max(self.spec.constraint_violation(draws[r]) for r in rows)
        if worst > 1e-8:
            raise AssertionError(f"kept draws violate identifiability constraints by {worst:.2e}")


def _inverse_chol(H: np.ndarray) -> np.ndarray:
    """Lower factor L with L L' = inv(H)."""
    try:
        C = linalg.cholesky(H, lower=True)
    except linalg.LinAlgError:
        w = np.linalg.eigvalsh(H)
        C = linalg.cholesky(H + (abs(w.min()) + 1e-8 * max(w.max(), 1.0)) * np.eye(len(H)), lower=True)
    return linalg.solve_triangular(C, np.eye(len(H)), lower=True).T


def _run_chain(args):
    spec, panel, config, chain = args
    return ChainRunner(spec, panel, config).run(chain)


def fit_mcmc(spec: ModelSpec, panel: Panel, config: SamplerConfig | None = None) -> PosteriorSamples:
    """Run ``config.n_chains`` independent chains; output depends only on the seed and inputs."""
    config = config or SamplerConfig()
    if panel.observed.shape != (len(spec.region_ids), len(spec.days)):
        raise ValueError("panel does not match the model")
    jobs = [(spec, panel, config, c) for c in range(config.n_chains)]
    if config.n_jobs > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=config.n_jobs) as pool:
            results = list(pool.map(_run_chain, jobs))
    else:
        results = [_run_chain(j) for j in jobs]
    chains = [r[0] for r in results]
    acceptance = {}
    for name in results[0][1]:
        acceptance[name] = float(np.mean([r[1][name] for r in results]))
    model = {
        "model_id": spec.model_id,
        "lag": spec.lag_days,
        "degree": spec.poly_degree,
        "weeks_mode": spec.weeks_mode,
        "temporal_resolution": spec.temporal_resolution,
        "interaction_kind": spec.interaction_kind,
        "region_ids": list(spec.region_ids),
        "days": [int(d) for d in spec.days],
        "week": [int(w) for w in spec.week],
    }
    logger.info("model %d: acceptance %s", spec.model_id, {k: round(v, 3) for k, v in acceptance.items()})
    return PosteriorSamples(chains=chains, registry=spec.registry, acceptance=acceptance, config=config, model=model)
