"""Self-check suite on small seeded instances, reported as JSON."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import theory
from ..controller import LossKind
from ..data import TeacherSpec, generate_student_teacher
from ..dynamics import SimConfig, ou_step, simulate
from ..netcore import forward_ss, init_network, jacobian, jacobian_blocks
from ..plasticity import steady_state_update


@dataclass
class CheckResult:
    check: str
    status: str
    measured: float
    tolerance: float

    def to_dict(self):
        return dict(check=self.check, status=self.status, measured=float(self.measured),
                    tolerance=float(self.tolerance))


def make_instance(seed, sizes=(6, 5, 4, 3), n_samples=3, q_noise=0.1, target_scale=0.5):
    """Random tanh net with ``Q`` near ``J^T`` (at the first sample) plus inputs and targets."""
    rng = np.random.default_rng(seed)
    params = init_network(list(sizes), seed=seed)
    X = rng.standard_normal((n_samples, sizes[0]))
    Y = target_scale * rng.standard_normal((n_samples, sizes[-1]))
    blocks = jacobian_blocks(params, forward_ss(params, X[0]))
    params = params.with_Q([b.T + q_noise * rng.standard_normal(b.T.shape) for b in blocks])
    return params, X, Y


def check_gradient(seed=0, alpha=0.1, corrupt=False):
    params, X, Y = make_instance(seed)
    cfg = SimConfig(alpha_tilde=alpha)
    gW, gb = theory.grad_H_analytic(params, X, Y, cfg)
    if corrupt:
        gW = [g + 1e-2 * np.linalg.norm(g) * np.ones_like(g) for g in gW]
    oW, ob = theory.grad_H_oracle(params, X, Y, cfg)
    return theory.compare_gradients(gW + gb, oW + ob).max_rel_error


def check_alignment(seed=0, alpha=1e-6):
    params, X, Y = make_instance(seed)
    cfg = SimConfig(alpha_tilde=alpha, ideal_feedback=True)
    state, _ = theory.solve_equilibrium(params, X, Y, cfg)
    dW, _ = steady_state_update(params, state, alpha, check=True)
    gW, _ = theory.grad_H_from_state(params, state, cfg)
    return theory.angle_deg(dW, [-g for g in gW])


def lemma_s2_gaps(seed=0, alphas=(1e-2, 1e-4, 1e-6)):
    params, X, _ = make_instance(seed)
    J = jacobian(params, forward_ss(params, X[0]))
    return [theory.lemma_s2_gap(J, J.T, a) for a in alphas]


def check_scaled_jacobian(seed=0, scales=(0.5, 1.0, 1.5, 3.0)):
    params, X, _ = make_instance(seed)
    acts = forward_ss(params, X[0])
    return max(theory.scaled_jacobian_identity(params, acts, a) for a in scales)


def check_fixed_point(seed=0, alpha=1e-3):
    params, X, Y = make_instance(seed)
    _, diag = theory.solve_equilibrium(params, X, Y, SimConfig(alpha_tilde=alpha))
    return float(max(diag.fixed_point_residual.max(), diag.equilibrium_residual.max()))


def ou_statistics(n_steps=200_000, dt=0.02, tau_eps=0.2, seed=0):
    """Relative errors of the stationary variance and lag-1 autocorrelation."""
    rng = np.random.default_rng(seed)
    width = 16
    burn = int(10 * tau_eps / dt)
    dbeta = rng.standard_normal((n_steps + burn, width))
    eps = np.zeros(width)
    out = np.empty((n_steps, width))
    for m in range(n_steps + burn):
        eps = ou_step(eps, dt, tau_eps, dbeta=dbeta[m])
        if m >= burn:
            out[m - burn] = eps
    var = out.var()
    x = out - out.mean(axis=0)
    lag1 = np.sum(x[1:] * x[:-1]) / np.sum(x * x)
    var_err = abs(var - 1.0 / (2 * tau_eps)) * 2 * tau_eps
    ac_err = abs(lag1 - np.exp(-dt / tau_eps)) / np.exp(-dt / tau_eps)
    return var_err, ac_err


def proposition1(seed=0, perturb=0.3):
    """(H, L) with the student equal to the teacher, then with perturbed weights."""
    spec = TeacherSpec(sizes=(6, 5, 4, 3), seed=seed)
    ds = generate_student_teacher(spec, 4, seed)
    student = spec.build()
    student = student.with_Q([b.T for b in jacobian_blocks(student, forward_ss(student, ds.inputs[0]))])
    cfg = SimConfig(alpha_tilde=1e-3)
    loss = LossKind.squared_error()
    out = []
    for p in (student, student.with_W([l.W + perturb * np.random.default_rng(seed).standard_normal(l.W.shape)
                                       for l in student.layers])):
        H = theory.surrogate_loss(p, ds.inputs, ds.targets, cfg)
        L = theory.training_loss(p, ds.inputs, ds.targets, loss)
        out.append((H, L))
    return out


def run_checks(seed=0, corrupt_gradient=False):
    """All checks as :class:`CheckResult` objects (deterministic for a given seed)."""
    res = []

    def add(name, measured, tol, ok):
        res.append(CheckResult(name, "pass" if ok else "fail", measured, tol))

    for a in (1e-3, 0.1, 1.0):
        err = check_gradient(seed, a, corrupt=corrupt_gradient)
        add(f"gradient_H_alpha={a:g}", err, 1e-4, err < 1e-4)
    ang = check_alignment(seed)
    add("alignment_deg", ang, 0.5, ang < 0.5)
    gaps = lemma_s2_gaps(seed)
    add("lemma_s2_limit", gaps[-1], 1e-4, gaps[-1] < 1e-4 and gaps[0] > gaps[1] > gaps[2])
    sj = check_scaled_jacobian(seed)
    add("scaled_jacobian_identity", sj, 1e-10, sj < 1e-10)
    fp = check_fixed_point(seed)
    add("fixed_point_residual", fp, 1e-6, fp < 1e-6)
    var_err, ac_err = ou_statistics(seed=seed)
    add("ou_variance_rel_err", var_err, 0.1, var_err < 0.1)
    add("ou_lag1_rel_err", ac_err, 0.05, ac_err < 0.05)
    (H0, L0), (H1, L1) = proposition1(seed)
    add("prop1_teacher_H", max(H0, L0), 1e-10, H0 < 1e-10 and L0 < 1e-10)
    add("prop1_perturbed_H", min(H1, L1), 1e-4, H1 > 1e-4 and L1 > 1e-4)
    return res


def verify(out_path="verify_report.json", seed=0, corrupt_gradient=False):
    """Run the suite, write the JSON report and return ``(path, all_passed)``."""
    res = run_checks(seed, corrupt_gradient=corrupt_gradient)
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([r.to_dict() for r in res], indent=2) + "\n")
    return path, all(r.status == "pass" for r in res)
